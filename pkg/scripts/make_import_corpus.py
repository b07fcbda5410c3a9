"""Generate the synthetic labeled import corpora used to train the suspicion model.

Each API is placed in exactly ``count`` of the ``n`` samples of its class, so
per-class prevalence is controlled exactly. Output is deterministic.
"""

import argparse
import random
from pathlib import Path

N = 100

# api: (malicious count, benign count) out of N samples each
PREVALENCE = {
    "socket": (70, 10),
    "connect": (65, 12),
    "send": (60, 15),
    "recv": (55, 20),
    "fork": (55, 20),
    "execve": (50, 15),
    "unlink": (35, 10),
    "ptrace": (40, 5),
    "IsDebuggerPresent": (45, 10),
    "IsProcessorFeaturePresent": (20, 25),
    "GetTickCount": (35, 30),
    "CreateFileA": (40, 55),
    "printf": (20, 80),
    "puts": (15, 60),
    "clock": (30, 35),
    "sleep": (45, 30),
    "time": (40, 50),
    "getcwd": (25, 30),
    "getenv": (30, 40),
    "strcmp": (50, 70),
    "strncmp": (20, 30),
    "memcmp": (30, 40),
    "geteuid": (30, 20),
    "getppid": (25, 15),
}


def build(label: int, seed: int) -> list[list[str]]:
    rng = random.Random(seed * 2 + label)
    samples: list[list[str]] = [[] for _ in range(N)]
    for api, counts in PREVALENCE.items():
        for i in sorted(rng.sample(range(N), counts[label])):
            samples[i].append(api)
    return samples


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="corpus")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, suffix in ((0, "malicious"), (1, "benign")):
        lines = [",".join(s) for s in build(label, args.seed)]
        (out / f"imports.{suffix}").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / f'imports.{suffix}'} ({len(lines)} samples)")


if __name__ == "__main__":
    main()
