"""Recall and HiR of PSF-VAE and Multi-VAE as the simulated U_b size K_b grows."""
import argparse
import logging
from dataclasses import replace

from psfvae.experiments import Results, format_table, run_seed
from psfvae.models.train import TrainConfig
from psfvae.simgen import SimConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--values", default="2,4,8,16")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--models", default="multi_vae,psf_vae")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    for k_b in (int(v) for v in args.values.split(",")):
        sim = SimConfig(k_b=k_b)
        sim = replace(sim, k_s=min(sim.k_s, sim.k_f))
        train = TrainConfig(k_f=sim.k_f, k_b=k_b)
        res = Results()
        for seed in (int(s) for s in args.seeds.split(",")):
            run_seed(args.models.split(","), seed, sim, train, results=res)
        print(f"K_b = {k_b}")
        print(format_table(res))


if __name__ == "__main__":
    main()
