"""Script to generate small synthetic datasets for offline smoke runs."""

import argparse
from pathlib import Path

from featherlite.dataio import DATASETS, write_synthetic_dataset


def main():
    """CLI entry point."""
    parser = argparse.ArgumentParser(description="Generate a synthetic IDX / CIFAR-binary dataset")
    parser.add_argument("data_dir", type=Path, help="Dataset root (files go to <data_dir>/<dataset>/)")
    parser.add_argument(
        "--dataset", choices=sorted(DATASETS), default="mnist", help="On-disk format to mimic"
    )
    parser.add_argument("--train", type=int, default=1200, help="Training samples")
    parser.add_argument("--test", type=int, default=300, help="Test samples")
    parser.add_argument("--seed", type=int, default=0, help="Random seed")
    args = parser.parse_args()

    directory = write_synthetic_dataset(
        args.dataset, args.data_dir, train_size=args.train, test_size=args.test, seed=args.seed
    )
    print(f"Generated synthetic {args.dataset}: {directory} ({args.train} train, {args.test} test)")


if __name__ == "__main__":
    main()
