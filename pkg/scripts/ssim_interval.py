"""SSIM between a frame and the frame k steps later, under drifting light.

Shows how quickly frame-to-frame similarity decays with the gap, which is
what bounds the usable window length for an illumination-stable segment.

    python3 scripts/ssim_interval.py --drift 0.3 --max-gap 60
"""
import argparse

import numpy as np

from vidformer.sigproc import ssim
from vidformer.skinsim import BvpSpec, SceneConfig, render_clip, synth_bvp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--drift", type=float, default=0.2, help="illumination change over the clip")
    ap.add_argument("--noise", type=float, default=2.0)
    ap.add_argument("--rate", type=float, default=30.0)
    ap.add_argument("--duration", type=float, default=10.0)
    ap.add_argument("--max-gap", type=int, default=90)
    args = ap.parse_args()
    bvp = synth_bvp(BvpSpec(hr=72, rate=args.rate, duration=args.duration))
    scene = SceneConfig(height=64, width=64, illumination="drift", illum_amplitude=args.drift,
                        noise_sigma=args.noise, base=(120.0, 90.0, 70.0), seed=0)
    frames, _, _ = render_clip(bvp.waveform, scene)
    grey = frames.astype(float).mean(axis=-1)
    print("gap_frames,gap_s,ssim_mean")
    for gap in range(0, args.max_gap + 1, max(1, args.max_gap // 15)):
        vals = [ssim(grey[i], grey[i + gap]) for i in range(0, len(grey) - gap, max(1, len(grey) // 20))]
        print(f"{gap},{gap / args.rate:.2f},{np.mean(vals):.4f}")


if __name__ == "__main__":
    main()
