"""Median local Lipschitz constant of policies cloned from one DDP dataset with different regularisers."""

from _common import emit, parser, setup
from veronica.experiments import smoothness_comparison

if __name__ == "__main__":
    p = parser(__doc__, "cartpole_swingup.yaml")
    p.add_argument("--kinds", nargs="+", default=["sar", "none"], choices=["none", "gaussian", "ar", "sar"])
    args = p.parse_args()
    emit(smoothness_comparison(setup(args), tuple(args.kinds)), args.out)
