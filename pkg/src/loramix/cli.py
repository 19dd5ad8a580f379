"""Command line entry point: ``loramix {prior,gen,edit,selftest}``."""
import argparse
import sys

from .pipeline import EXIT_INVARIANT, EXIT_OK, configure_logging, run_command
from .selftest import format_table, run_selftest


def build_parser():
    parser = argparse.ArgumentParser(prog="loramix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("prior", "extract subject priors and write masks"),
                            ("gen", "multi-subject generation with blended adapters"),
                            ("edit", "invert an input latent and re-denoise with blended adapters")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int, help="noise seed")
        p.add_argument("--steps", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--t", type=float, help="blending gate flow time")
        p.add_argument("--gamma", type=float, help="prior extraction flow time")
        p.add_argument("--tau", type=float, help="binarisation quantile")
        p.add_argument("--timings", action="store_true", help="record stage timings in the report")
        if name == "edit":
            p.add_argument("--input", required=True, metavar="PATH", help="latent dump to edit")
    st = sub.add_parser("selftest", help="run the oracle suites")
    st.add_argument("--mutate", action="append", default=[], metavar="KERNEL",
                    help="corrupt a kernel before running (mutation check)")
    return parser


def main(argv=None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        try:
            results = run_selftest(mutations=args.mutate)
        except KeyError as exc:
            print(exc.args[0], file=sys.stderr)
            return 2
        print(format_table(results))
        return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT
    overrides = {"noise_seed": args.seed, "steps": args.steps, "out": args.out,
                 "t": args.t, "gamma": args.gamma, "tau": args.tau}
    code = run_command(args.command, args.config, overrides, input_path=getattr(args, "input", None),
                       timings=args.timings)
    return code


if __name__ == "__main__":
    sys.exit(main())
