"""Train a small segmentation model on synthetic nodules and look at one prediction.

A short run (base width 8, 64x64 images, 12 epochs) takes about three minutes on a
single core. The acceptance suite uses a wider model and more data; see
README.md for that configuration.

    python3 demos/train_on_synthetic.py [--epochs N] [--out DIR]
"""

import argparse
from pathlib import Path

import numpy as np

from s3tunet import ModelConfig, RmSvitConfig, SynthConfig, TrainConfig, evaluate, generate_synthetic, predict, train
from s3tunet.data import save_pgm


def ascii_mask(mask, step=4):
    return "\n".join("".join("#" if v else "." for v in row[::step]) for row in mask[::step])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--out", default="demo_run")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(exist_ok=True)

    samples = generate_synthetic(SynthConfig(size=64, n_samples=96, seed=7, radius=(3, 12)))
    train_set, val_set = samples[:80], samples[80:]
    model_cfg = ModelConfig(base_channels=8, input_size=(64, 64), rm_svit=RmSvitConfig(grid=(4, 4)))
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=8, seed=0,
                            checkpoint_path=str(out / "best.ckpt"), log_path=str(out / "log.jsonl"))

    result = train(model_cfg, train_cfg, train_set, val_set,
                   progress=lambda r: print(f"epoch {r.epoch}: loss {r.loss:.4f}, val DSC {r.val['dsc']:.4f}"))
    print(f"best epoch {result.best_epoch}, val DSC {result.best_dsc:.4f}")

    report = evaluate(str(out / "best.ckpt"), val_set)
    print(f"checkpoint on validation: DSC {report.dsc:.4f}, sensitivity {report.sensitivity:.4f}, "
          f"precision {report.precision:.4f}, mIoU {report.miou:.4f}")

    sample = val_set[0]
    probs, mask = predict(str(out / "best.ckpt"), sample.image)
    save_pgm(sample.image[0], out / "image.pgm")
    save_pgm(mask, out / "mask.pgm")
    print("\nground truth" + " " * 6 + "prediction")
    for a, b in zip(ascii_mask(sample.mask[0] > 0.5).splitlines(), ascii_mask(mask > 0.5).splitlines()):
        print(f"{a}  {b}")
    print(f"\nmax probability {probs.max():.3f}; files written to {out}/")


if __name__ == "__main__":
    main()
