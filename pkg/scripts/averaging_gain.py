"""Last-iterate vs averaged-iterate moment distance on conjugate linear regression.

Writes one CSV row per (dimension, seed) with the stopping iteration and both
distances to the exact posterior.
"""
import argparse
import csv
import sys

from robustvi.metrics import params_distance
from robustvi.models import LinRegSpec, linreg_generate
from robustvi.workflow import WorkflowConfig, run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dims", type=int, nargs="+", default=[5, 20])
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--t-max", type=int, default=120_000)
    p.add_argument("--out", default="-")
    args = p.parse_args(argv)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["dim", "seed", "T0", "T_stop", "rule", "warned", "D_mu_last", "D_mu_avg",
                "D_Sigma_last", "D_Sigma_avg"])
    for dim in args.dims:
        for seed in range(args.seeds):
            model, _ = linreg_generate(LinRegSpec(dim=dim, gamma=args.gamma, seed=seed))
            cfg = WorkflowConfig(seed=seed, num_chains=args.chains, t_max=args.t_max, record_trace=False)
            res = run(model, "full_rank", cfg)
            last = params_distance(res.lambda_last[0], model.analytic_moments)
            avg = params_distance(res.lambda_bar, model.analytic_moments)
            w.writerow([dim, seed, res.T0, res.T_stop, res.rule_fired, res.warned_nonconvergence,
                        last.d_mu, avg.d_mu, last.d_sigma, avg.d_sigma])
            fh.flush()
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
