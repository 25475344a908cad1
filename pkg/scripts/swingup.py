"""Train a cart-pole swing-up policy with ADMM and test it on held-out initial states."""

from _common import emit, parser, setup
from veronica.experiments import swingup_generalization

if __name__ == "__main__":
    p = parser(__doc__, "cartpole_swingup.yaml")
    p.add_argument("--angle-tol", type=float, default=0.2)
    p.add_argument("--cost-ratio", type=float, default=2.0)
    args = p.parse_args()
    emit(swingup_generalization(setup(args), args.angle_tol, args.cost_ratio), args.out)
