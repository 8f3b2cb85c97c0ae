"""End-to-end demo: pretrain, permute, fit the INR, then report.

Runs the whole CLI pipeline inside one process and leaves every artifact
(checkpoints and CSVs) in --workdir. The default profile is the LeNet
width-morphing experiment; --quick shrinks everything for a smoke run.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, "src")  # allow running from a source checkout

from weightmorph.cli import main as cli  # noqa: E402
from weightmorph.datasets import write_synthetic_dataset  # noqa: E402


def run(argv: list) -> None:
    print("$ weightmorph " + " ".join(argv))
    t0 = time.time()
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"step failed with exit code {code}")
    print(f"  [{time.time() - t0:.1f}s]")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/pipeline")
    ap.add_argument("--data", default="", help="IDX directory; synthesized "
                                               "into workdir when omitted")
    ap.add_argument("--arch", default="lenet",
                    choices=("mlp", "lenet", "miniresnet"))
    ap.add_argument("--pretrain-epochs", type=int, default=10)
    ap.add_argument("--train-epochs", type=int, default=30)
    ap.add_argument("--limit-train", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true",
                    help="tiny INR and two epochs per stage")
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    data = args.data
    if not data:
        data = str(work / "data")
        if not Path(data).is_dir():
            print(f"synthesizing digits into {data}")
            write_synthetic_dataset(data, n_train=max(args.limit_train, 2000),
                                    n_test=2000, seed=args.seed)

    base = str(work / "base.nmwt")
    smooth = str(work / "smooth.nmwt")
    inr = str(work / "inr.nmwt")
    pre_epochs, fit_epochs = args.pretrain_epochs, args.train_epochs
    extra = []
    if args.quick:
        pre_epochs, fit_epochs = 2, 2
        extra = ["--freq", "4", "--layers", "3", "--hidden", "32"]

    run(["pretrain", "--arch", args.arch, "--data", data,
         "--epochs", str(pre_epochs), "--limit-train", str(args.limit_train),
         "--seed", str(args.seed), "--out", base])
    run(["permute", "--model", base, "--solver", "mshp",
         "--seed", str(args.seed), "--out", smooth,
         "--report", str(work / "tv.csv")])
    train_args = ["train", "--model", smooth, "--data", data,
                  "--epochs", str(fit_epochs),
                  "--limit-train", str(args.limit_train),
                  "--seed", str(args.seed), "--out", inr,
                  "--log", str(work / "curve.csv")] + extra
    if args.arch == "miniresnet":
        train_args += ["--depth-pool", "1,2,3"]
    run(train_args)

    run(["sweep", "--inr", inr, "--data", data, "--grid", "0,0.25,0.5,0.75",
         "--k", "50", "--seed", str(args.seed),
         "--out", str(work / "sweep.csv")])
    run(["ablate-sampling", "--inr", inr, "--data", data,
         "--grid", "0.5,0.75", "--k", "1,50", "--seeds", "0,1,2",
         "--out", str(work / "ablation.csv")])
    run(["similarity", "--inr", inr, "--data", data, "--grid", "0,0.5",
         "--model", smooth, "--k", "50", "--seed", str(args.seed),
         "--out", str(work / "similarity.csv")])
    if args.arch == "miniresnet":
        run(["heatmap", "--inr", inr, "--data", data,
             "--l1", "1,2,3,6,9", "--l2", "1,2,3,6,9",
             "--out", str(work / "heatmap.csv")])

    print(f"all artifacts in {work}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
