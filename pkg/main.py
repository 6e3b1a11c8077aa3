"""
Entry point: `python main.py <command> [options]`.
"""
import os
import sys

_BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def pin_blas_threads(argv):
    """
    Fix the BLAS thread count before numpy loads: one thread unless --threads asks for more.
    """
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for name in _BLAS_THREAD_VARS:
        os.environ.setdefault(name, threads)


def main():
    """
    Hands the command line to the stdd command surface and exits with its code.
    """
    argv = sys.argv[1:]
    pin_blas_threads(argv)
    from stdd.cli import main as run
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
