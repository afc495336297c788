"""Accept/reject rates of a trained model as the threshold moves.

Enrolled captures are fresh measurements of the training devices under
random conditions; impostors are newly drawn devices the model never saw.

    python3 scripts/rejection_sweep.py --model run/model.drnw --data data/ --trials 50
"""

import argparse
import json

import numpy as np

from dramnet import rng
from dramnet.evaluation import authenticate, decide
from dramnet.model import load_model
from dramnet.sim import ALL_CONDITIONS, load_dataset, new_device, sample_measurement


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset the model was trained on (for device seeds)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--thresholds", nargs="+", type=float, default=[0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99])
    p.add_argument("--seed", type=int, default=1234)
    args = p.parse_args()

    model = load_model(args.model)
    ds = load_dataset(args.data)
    enrolled, impostor = [], []
    for t in range(args.trials):
        k = t % ds.n_devices
        dev = new_device(ds.rows, ds.cols, ds.device_seeds[k], ds.params, device_id=k)
        cond = ALL_CONDITIONS[t % len(ALL_CONDITIONS)]
        m = sample_measurement(dev, cond, rng.derive_seed(args.seed, 1, t))
        enrolled.append((k, authenticate(model, m, 0.0).probabilities))
        stranger = new_device(ds.rows, ds.cols, rng.derive_seed(args.seed, 2, t), ds.params)
        impostor.append(authenticate(model, sample_measurement(stranger, ALL_CONDITIONS[0], t), 0.0).probabilities)

    for tau in args.thresholds:
        accept = np.mean([decide(pr, tau).device_id == k for k, pr in enrolled])
        reject = np.mean([not decide(pr, tau).accepted for pr in impostor])
        print(json.dumps({"threshold": tau, "enrolled_accept": accept, "impostor_reject": reject}))


if __name__ == "__main__":
    main()
