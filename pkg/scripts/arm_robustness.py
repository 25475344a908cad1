"""Mean reaching error of the two-link arm under sensor noise, per regulariser."""

from _common import emit, parser, setup
from veronica.experiments import robustness_comparison

if __name__ == "__main__":
    p = parser(__doc__, "arm_reach.yaml")
    p.add_argument("--zeta", type=float, default=0.01)
    p.add_argument("--kinds", nargs="+", default=["sar", "gaussian"], choices=["none", "gaussian", "ar", "sar"])
    args = p.parse_args()
    emit(robustness_comparison(setup(args), args.zeta, tuple(args.kinds)), args.out)
