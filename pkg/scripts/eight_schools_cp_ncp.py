"""Centered vs non-centered eight schools: stopping time, iterate tails and PSIS k-hat."""
import argparse

import numpy as np

from robustvi.diagnostics import psis_khat
from robustvi.models import eight_schools
from robustvi.workflow import WorkflowConfig, run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--t-max", type=int, default=50_000)
    p.add_argument("--family", default="full_rank")
    args = p.parse_args(argv)
    print("param,seed,T0,T_stop,rule,iterate_khat,psis_khat_last,psis_khat_avg")
    for param in ("CP", "NCP"):
        model = eight_schools(param)
        for seed in range(args.seeds):
            res = run(model, args.family, WorkflowConfig(seed=seed, t_max=args.t_max, record_trace=False))
            rng = np.random.default_rng(seed)
            k_last = psis_khat(model, res.lambda_last[0], rng=rng)
            k_avg = psis_khat(model, res.lambda_bar, rng=rng)
            print(f"{param},{seed},{res.T0},{res.T_stop},{res.rule_fired},{res.iterate_khat_max:.3f},"
                  f"{k_last:.3f},{k_avg:.3f}")


if __name__ == "__main__":
    main()
