"""A real client/server run over loopback TCP.

The same experiment config that drives the simulator also drives actual
socket processes.  Here the server and two clients run as threads in one
process, authenticate with a shared token, and leave a run directory
with the resolved config, metrics, and the final model.

    python demos/02_distributed_loopback.py
"""

import socket
import tempfile
import threading
from pathlib import Path

from fedkit.config import load_config
from fedkit.runner import run_client, run_server

CONFIG = """
server_configs:
  scheduler: SyncScheduler
  aggregator: FedAvgAggregator
  num_global_epochs: 3
  model_configs:
    layer_dims: [5, 8, 3]
    activation: relu
    loss: softmax_cross_entropy
    init_seed: 7
  comm:
    auth_token: open-sesame
client_configs:
  train_configs:
    optimizer: sgd
    lr: 0.05
    batch_size: 16
    local_steps: 8
  data_configs:
    dataset_name: blobs
    dataset_kwargs:
      classes: 3
      dim: 5
      per_class: 40
      seed: 1
      partition:
        scheme: iid
clients:
  - client_id: alpha
  - client_id: beta
"""


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def main():
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "experiment.yaml"
        cfg_path.write_text(CONFIG)
        cfg = load_config(cfg_path)

        port = free_port()
        run_dir = Path(tmp) / "run"
        outputs = {}

        def server_role():
            outputs["run"] = run_server(cfg, run_dir=run_dir, port=port, timeout=60)

        def client_role(cid: str):
            outputs[cid] = run_client(cfg, cid, host="127.0.0.1", port=port)

        server = threading.Thread(target=server_role)
        server.start()
        print(f"server listening on 127.0.0.1:{port}")
        clients = [
            threading.Thread(target=client_role, args=(cid,))
            for cid in ("alpha", "beta")
        ]
        for t in clients:
            t.start()
        for t in clients + [server]:
            t.join()

        out = outputs["run"]
        print(f"completed epoch {out.epoch} after {out.updates_processed} updates")
        for cid in ("alpha", "beta"):
            print(f"  {cid} trained {outputs[cid]} rounds")
        print("run directory artifacts:")
        for p in sorted(run_dir.iterdir()):
            print(f"  {p.name}  ({p.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
