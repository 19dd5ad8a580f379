"""Write the seeded demo adapters referenced by configs/default.json.

Two adapters with different ranks and different target sets:
``subject_a`` touches every image/joint projection at rank 2,
``subject_b`` only the attention projections at rank 4.

    python demos/make_demo_adapters.py
"""
from pathlib import Path

from loramix import ModelConfig, init_model, random_bundle, save_adapter, zero_bundle

out = Path(__file__).resolve().parent.parent / "configs" / "adapters"
out.mkdir(parents=True, exist_ok=True)

model = init_model(ModelConfig())
attention_only = [n for n in model.weights
                  if n.startswith("block.") and ".text." not in n and n.rsplit(".", 1)[1] in ("q", "k", "v", "o")]

bundles = [
    random_bundle(model, "subject_a", rank=2, seed=101, trigger=1),
    random_bundle(model, "subject_b", rank=4, seed=202, layers=attention_only, trigger=4),
    zero_bundle(model, "identity"),
]
for b in bundles:
    save_adapter(b, out / f"{b.name}.lora")
    print(f"wrote {out / (b.name + '.lora')}: {len(b.deltas)} layers")
