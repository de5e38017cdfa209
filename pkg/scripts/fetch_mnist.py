"""Write the desk-scale MNIST sample (4000 train / 1000 test) as IDX files.

    python scripts/fetch_mnist.py [out_dir]
"""

import sys

from fpalab.data import write_mnist_subset

if __name__ == "__main__":
    out = write_mnist_subset(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    print(f"wrote IDX files to {out}")
