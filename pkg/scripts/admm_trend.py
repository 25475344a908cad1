"""Per-iteration cloning loss and primal residuals of ADMM on a small cart-pole dataset."""

from _common import emit, parser, setup
from veronica.experiments import admm_trend, with_overrides

if __name__ == "__main__":
    p = parser(__doc__, "cartpole_swingup.yaml")
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--T", type=int, default=100)
    p.add_argument("--iterations", type=int, default=5)
    args = p.parse_args()
    cfg = with_overrides(setup(args), dataset={"N": args.N, "T": args.T},
                         admm={"max_iterations": args.iterations, "patience": args.iterations})
    emit(admm_trend(cfg), args.out)
