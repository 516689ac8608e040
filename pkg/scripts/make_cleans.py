"""Write the procedural clean image set used by the desk experiments."""
import argparse

from mgmoe.cleans import write_clean_set

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/clean")
    ap.add_argument("--count", type=int, default=133)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=128)
    a = ap.parse_args()
    write_clean_set(a.out, a.count, seed=a.seed, size=a.size)
