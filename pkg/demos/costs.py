"""Parameter and multiply counts for a few configurations, and how they grow with length.

Run from the repository root::

    python3 demos/costs.py
"""
from tisc import model
from tisc.model import NetworkConfig

CONFIGS = {
    "minimal 16-channel": dict(segment_length=1024, num_data_channels=16, input_scales=[8, 9],
                               hidden_stack=[[9, 9]]),
    "2-channel, 3 stacks": dict(segment_length=1024, num_data_channels=2, num_tisc_channels=3,
                                input_scales=[6, 9], hidden_stack=[[7, 9]]),
    "burst task": dict(segment_length=1024, input_scales=[4, 9], hidden_stack=[[5, 9]]),
}


def main():
    for name, kw in CONFIGS.items():
        rep = model.count_costs(NetworkConfig(**kw))
        print(f"{name:>22}: {rep.macs_total:>7} MACs {rep.macs_per_layer}, "
              f"{rep.active_params} active / {rep.stored_params} stored parameters")

    print("\nMACs versus segment length (input scales 2..5):")
    prev = None
    for n in range(6, 14):
        rep = model.count_costs(NetworkConfig(segment_length=1 << n, input_scales=[2, 5]))
        ratio = "" if prev is None else f"  x{rep.macs_total / prev:.3f}"
        print(f"  L={1 << n:>5}: {rep.macs_total:>7}{ratio}")
        prev = rep.macs_total


if __name__ == "__main__":
    main()
