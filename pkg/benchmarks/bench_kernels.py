"""Thin wrapper so the benchmark can be run straight from the repo."""

from densessl.bench import run_benchmark

if __name__ == "__main__":
    run_benchmark()
