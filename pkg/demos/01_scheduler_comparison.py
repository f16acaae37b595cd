"""Same federated workload, three scheduling policies.

Ten clients with a 10x spread in per-step speed train on class-skewed
shards of a synthetic blob dataset.  We run the identical workload under
synchronous rounds, fully asynchronous updates, and grouped scheduling,
then compare final accuracy and how busy each client was kept.

    python demos/01_scheduler_comparison.py
"""

import numpy as np

from fedkit.client import TrainConfig
from fedkit.models import (
    ModelSpec, PartitionSpec, dataset_metrics, make_blobs, partition, split_train_val,
)
from fedkit.sim import SimClient, SimScenario, draw_batch_times, run_simulation

SPEC = ModelSpec((16, 32, 10), "relu", "softmax_cross_entropy")
MODES = {
    "synchronous": ("SyncScheduler", "FedAvgAggregator"),
    "asynchronous": ("AsyncScheduler", "FedAsyncAggregator"),
    "grouped": ("CompassScheduler", "FedCompassAggregator"),
}


def build_clients(seed: int):
    ds = make_blobs(classes=10, dim=16, per_class=300, spread=5.0, seed=seed)
    train, val = split_train_val(ds, 0.2, seed=seed)
    shards = partition(
        train, PartitionSpec("class_restricted", 10, seed=seed, classes_range=(5, 7))
    )
    speeds = draw_batch_times(10, fastest=0.2, spread=10.0, seed=0)
    cfg = TrainConfig(
        optimizer="sgd", lr=0.02, batch_size=32, local_steps=150,
        seed=seed, send_delta=True, prox_mu=1.0,
    )
    clients = [SimClient(f"c{i:02d}", shards[i], cfg, speeds[i]) for i in range(10)]
    return clients, val


def main():
    seed = 0
    clients, val = build_clients(seed)
    print(f"{'policy':14s} {'accuracy':>9s} {'virtual time':>13s} {'min util':>9s} {'mean util':>10s}")
    for name, (scheduler, aggregator) in MODES.items():
        scen = SimScenario(
            model_spec=SPEC, clients=build_clients(seed)[0],
            num_global_epochs=10_000, max_updates=300,
            scheduler=scheduler, aggregator=aggregator,
            init_seed=seed, seed=seed,
        )
        res = run_simulation(scen)
        acc = dataset_metrics(SPEC, res.final_params, val)["accuracy"]
        utils = [u.utilization for u in res.utilization.per_client.values()]
        print(
            f"{name:14s} {acc:9.4f} {res.virtual_time:12.1f}s "
            f"{min(utils):9.3f} {np.mean(utils):10.3f}"
        )
    print()
    print("Synchronous rounds idle the fast clients; asynchronous updates keep")
    print("everyone busy but degrade accuracy under label skew; grouped")
    print("scheduling keeps both the accuracy and the hardware utilization.")


if __name__ == "__main__":
    main()
