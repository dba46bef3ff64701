import json

from tempclip.config import parse_override

TINY_SETTINGS = [
    "model.embed_dim=8", "model.num_layers=1", "model.num_heads=2", "model.frames_T=3", "model.frame_size=8",
    "data.train_per_class=2", "data.eval_per_class=2",
    "pretrain.epochs=1", "pretrain.warmup_epochs=0", "pretrain.batch=8",
    "train.epochs=1", "train.warmup_epochs=1", "train.batch=8", "train.swa_start=1", "train.swa_cycle=1",
    "train.lr_init=1e-3", "train.lr_final=1e-5", "train.warmup_lr=1e-5",
]


def write_config(path, seed=0, extra=()):
    raw = {"seed": seed}
    for item in list(TINY_SETTINGS) + list(extra):
        section, key, value = parse_override(item)
        raw.setdefault(section, {})[key] = value
    path.write_text(json.dumps(raw))
    return path
