"""Alternating adversarial optimization with checkpointing and
deterministic resumption.

Each step: (1) one Adam update of both directions' generators and fusion
blocks on the full composite objective over a pair of frame triplets,
then (2) one Adam update of each discriminator on real frames versus the
just-generated (detached) frames.  Batch sampling is driven by a single
numpy PCG64 stream whose state lives in the checkpoint, so a resumed run
replays exactly the batches an uninterrupted run would have seen.

Checkpoint layout (little-endian, versioned):

    magic  b"FCCKPT01"
    uint64 header length
    header JSON (sorted keys): format_version, iteration, extractor_seed,
        config (JSON-typed train config), rng_state (numpy PCG64 state),
        opt_steps (per-parameter Adam step counters),
        tensors: ordered list of {name, dtype, shape}
    raw tensor payloads in header order ("f4"/"f8"/"u1")

Tensor names: ``bundle/<param>`` for model parameters, ``opt_<which>/
<param>.exp_avg`` and ``.exp_avg_sq`` for Adam moments, ``torch_rng`` for
the torch RNG state.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import toygen
from .errors import ConfigError, DataError, NumericError
from .flow import EstimatorParams, estimate_flow
from .losses import (
    LossReport,
    LossWeights,
    content_loss,
    gan_loss_d,
    gan_loss_g,
    temporal_loss,
    total_loss,
)
from .nets import FUSION_MODES, ContentExtractor, GeneratorBundle, rollout
from .losses import GAN_MODES

CHECKPOINT_MAGIC = b"FCCKPT01"
CHECKPOINT_VERSION = 1
ABLATABLE = ("temporal", "content", "cyc3d")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_DTYPE_CODES = {torch.float32: "f4", torch.float64: "f8", torch.uint8: "u1"}
_CODE_NP = {"f4": "<f4", "f8": "<f8", "u1": "u1"}


@dataclass
class TrainConfig:
    corpus: str = ""
    out_dir: str = "runs/default"
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    total_iters: int = 2000
    seed: int = 0
    ablate: frozenset = frozenset()
    fusion_mode: str = "learned"
    gan_mode: str = "nonsaturating"
    checkpoint_every: int = 500
    dtype: str = "float32"
    flow_mode: str = "ground_truth"
    occlusion_norm: str = "l2sq"
    fusion_input: str = "abs"
    gen_base_channels: int = 32
    disc_base_channels: int = 32
    n_res_blocks: int = 6
    fusion_hidden: int = 16
    patch70: bool = False
    extractor_seed: int = 1234
    history_buffer: bool = False
    compile_nets: bool = False
    pyramid_levels: int = 3
    lk_window: int = 7
    lk_iterations: int = 3

    def __post_init__(self) -> None:
        self.ablate = frozenset(self.ablate)
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.gan_mode not in GAN_MODES:
            raise ConfigError(f"unknown gan_mode {self.gan_mode!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.flow_mode not in ("ground_truth", "estimated"):
            raise ConfigError(f"unknown flow_mode {self.flow_mode!r}")
        if self.occlusion_norm not in ("l2", "l2sq"):
            raise ConfigError(f"unknown occlusion_norm {self.occlusion_norm!r}")
        bad = self.ablate - set(ABLATABLE)
        if bad:
            raise ConfigError(f"unknown ablation target(s): {sorted(bad)}")
        if self.history_buffer:
            raise ConfigError("history_buffer is a reserved hook and not implemented")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ablate"] = sorted(cfg.ablate)
    d["weights"] = dataclasses.asdict(cfg.weights)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    d["ablate"] = frozenset(d["ablate"])
    return TrainConfig(**d)


@dataclass
class Triplet:
    frames: torch.Tensor  # (K, 3, H, W)
    flows: torch.Tensor   # (K-1, 2, H, W)


@dataclass
class Batch:
    source: Triplet
    target: Triplet


class _ClipStore:
    """Uint8 frame cache over a corpus, with analytic flow on demand."""

    def __init__(self, corpus: toygen.Corpus):
        self.corpus = corpus
        self._frames: dict[tuple[str, int], np.ndarray] = {}

    def num_clips(self, domain: str) -> int:
        return self.corpus.num_train(domain)

    def frames_u8(self, domain: str, index: int) -> np.ndarray:
        key = (domain, index)
        if key not in self._frames:
            clip, _ = self.corpus.train_clip(domain, index)
            from .core import from_normalized

            self._frames[key] = np.stack([from_normalized(f) for f in clip.frames])
            # frames cached as uint8; drop the float clip to bound memory
            rel = (self.corpus.manifest.train_s if domain == "S" else self.corpus.manifest.train_t)[index]
            self.corpus._clips.pop(rel, None)
        return self._frames[key]

    def scene(self, domain: str, index: int) -> toygen.SceneSpec:
        rel = (self.corpus.manifest.train_s if domain == "S" else self.corpus.manifest.train_t)[index]
        return self.corpus.scene(rel)


def _frames_to_tensor(frames_u8: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    arr = frames_u8.astype(np.float64) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(0, 3, 1, 2)).to(dtype)


def _triplet_flows(cfg: TrainConfig, scene: toygen.SceneSpec, indices: list[int],
                   frames: torch.Tensor) -> torch.Tensor:
    if cfg.flow_mode == "ground_truth":
        fields = [
            toygen.flow_between(scene, indices[i], indices[i - 1])
            for i in range(1, len(indices))
        ]
        arr = np.stack(fields).transpose(0, 3, 1, 2)
        return torch.from_numpy(arr).to(frames.dtype)
    params = EstimatorParams(cfg.pyramid_levels, cfg.lk_window, cfg.lk_iterations)
    from .core import Frame

    fields = []
    for i in range(1, frames.shape[0]):
        prev = Frame(frames[i - 1].numpy().transpose(1, 2, 0).astype(np.float32))
        cur = Frame(frames[i].numpy().transpose(1, 2, 0).astype(np.float32))
        fields.append(estimate_flow(prev, cur, params).data)
    arr = np.stack(fields).transpose(0, 3, 1, 2)
    return torch.from_numpy(arr).to(frames.dtype)


def sample_batch(store: _ClipStore, rng: np.random.Generator, cfg: TrainConfig) -> Batch:
    """Draw one K-frame triplet per domain, with 50% temporal flipping.

    Flipped triplets get their flow recomputed for the reversed frame
    order (ground truth comes from the scene's analytic motion), never a
    sign-flipped copy of the forward flow.
    """
    k = cfg.weights.k_frames
    triplets = {}
    for domain in ("S", "T"):
        n = store.num_clips(domain)
        if n == 0:
            raise DataError(f"corpus has no training clips for domain {domain}")
        clip_idx = int(rng.integers(n))
        frames_u8 = store.frames_u8(domain, clip_idx)
        length = frames_u8.shape[0]
        if length < k:
            raise DataError(f"clip shorter than {k} frames")
        start = int(rng.integers(length - k + 1))
        indices = list(range(start, start + k))
        if rng.random() < 0.5:
            indices = indices[::-1]
        frames = _frames_to_tensor(frames_u8[indices], cfg.torch_dtype)
        scene = store.scene(domain, clip_idx)
        flows = _triplet_flows(cfg, scene, indices, frames)
        triplets[domain] = Triplet(frames=frames, flows=flows)
    return Batch(source=triplets["S"], target=triplets["T"])


@dataclass
class TrainState:
    config: TrainConfig
    bundle: GeneratorBundle
    extractor: ContentExtractor
    opt_g: torch.optim.Adam
    opt_d_s: torch.optim.Adam
    opt_d_t: torch.optim.Adam
    rng: np.random.Generator
    iteration: int = 0


def build_state(cfg: TrainConfig) -> TrainState:
    bundle = GeneratorBundle(
        gen_base=cfg.gen_base_channels,
        disc_base=cfg.disc_base_channels,
        n_res_blocks=cfg.n_res_blocks,
        fusion_hidden=cfg.fusion_hidden,
        fusion_input=cfg.fusion_input,
        patch70=cfg.patch70,
        init_seed=cfg.seed,
    )
    extractor = ContentExtractor(cfg.extractor_seed)
    if cfg.torch_dtype == torch.float64:
        bundle.double()
        extractor.double()
    if cfg.compile_nets:
        # in-place compile keeps parameter names checkpoint-stable
        for m in (bundle.i_st, bundle.i_ts, bundle.d_s, bundle.d_t, extractor):
            m.compile()
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=cfg.lr, betas=betas)
    opt_d_s = torch.optim.Adam(bundle.d_s.parameters(), lr=cfg.lr, betas=betas)
    opt_d_t = torch.optim.Adam(bundle.d_t.parameters(), lr=cfg.lr, betas=betas)
    rng = np.random.default_rng(cfg.seed)
    return TrainState(cfg, bundle, extractor, opt_g, opt_d_s, opt_d_t, rng)


def _generator_losses(state: TrainState, batch: Batch):
    cfg = state.config
    w = cfg.weights
    alpha, norm = w.alpha_occ, cfg.occlusion_norm
    x_s, x_t = batch.source.frames, batch.target.frames
    f_s, f_t = batch.source.flows, batch.target.flows
    out_t, _, synth_t = rollout(state.bundle, "s2t", x_s, f_s, cfg.fusion_mode, alpha, norm)
    out_s, _, synth_s = rollout(state.bundle, "t2s", x_t, f_t, cfg.fusion_mode, alpha, norm)

    fakes_t = torch.cat([out_t, synth_t[1:]])
    fakes_s = torch.cat([out_s, synth_s[1:]])
    gan_fwd = gan_loss_g(state.bundle.d_t(fakes_t), cfg.gan_mode)
    gan_bwd = gan_loss_g(state.bundle.d_s(fakes_s), cfg.gan_mode)

    # backward maps reuse the forward flow; frame 1 of each backward
    # synthesis is exactly the 2D-cycle reconstruction
    back_synth_s = state.bundle.i_ts(out_t)
    back_synth_t = state.bundle.i_st(out_s)
    recon_s, _, _ = rollout(state.bundle, "t2s", out_t, f_s, cfg.fusion_mode,
                            alpha, norm, synthesized=back_synth_s)
    recon_t, _, _ = rollout(state.bundle, "s2t", out_s, f_t, cfg.fusion_mode,
                            alpha, norm, synthesized=back_synth_t)
    cyc2d = ((back_synth_s[0:1] - x_s[0:1]).abs().mean()
             + (back_synth_t[0:1] - x_t[0:1]).abs().mean())
    cyc3d = ((recon_s[1:] - x_s[1:]).abs().mean()
             + (recon_t[1:] - x_t[1:]).abs().mean())

    content = (content_loss(state.extractor, x_s, out_t)
               + content_loss(state.extractor, x_s[1:], synth_t[1:])
               + content_loss(state.extractor, x_t, out_s)
               + content_loss(state.extractor, x_t[1:], synth_s[1:]))

    temporal = (temporal_loss(out_t, x_s, f_s, alpha, norm)
                + temporal_loss(out_s, x_t, f_t, alpha, norm))

    terms = {
        "gan_fwd": gan_fwd, "gan_bwd": gan_bwd, "cyc2d": cyc2d,
        "cyc3d": cyc3d, "content": content, "temporal": temporal,
    }
    return terms, fakes_t.detach(), fakes_s.detach()


def _report_total(terms: dict[str, float], w: LossWeights, ablate: frozenset) -> float:
    lam_cyc3d = 0.0 if "cyc3d" in ablate else w.lambda_cyc
    lam_cont = 0.0 if "content" in ablate else w.lambda_cont
    lam_temp = 0.0 if "temporal" in ablate else w.lambda_temp
    return (terms["gan_fwd"] + terms["gan_bwd"]
            + w.lambda_cyc * terms["cyc2d"] + lam_cyc3d * terms["cyc3d"]
            + lam_cont * terms["content"] + lam_temp * terms["temporal"])


def train_step(state: TrainState, batch_items: list[Batch]) -> LossReport:
    """One generator update followed by one update of each discriminator."""
    cfg = state.config
    w = cfg.weights

    acc: dict[str, torch.Tensor] = {}
    fakes_t_all, fakes_s_all, reals_t, reals_s = [], [], [], []
    state.opt_g.zero_grad()
    g_total = None
    for batch in batch_items:
        terms, fakes_t, fakes_s = _generator_losses(state, batch)
        item_total = total_loss(weights=w, ablate=cfg.ablate, **terms)
        g_total = item_total if g_total is None else g_total + item_total
        for name, value in terms.items():
            acc[name] = acc.get(name, 0.0) + value.detach()
        fakes_t_all.append(fakes_t)
        fakes_s_all.append(fakes_s)
        reals_t.append(batch.target.frames)
        reals_s.append(batch.source.frames)
    n = len(batch_items)
    (g_total / n).backward()
    state.opt_g.step()

    for opt, disc, reals, fakes in (
        (state.opt_d_t, state.bundle.d_t, reals_t, fakes_t_all),
        (state.opt_d_s, state.bundle.d_s, reals_s, fakes_s_all),
    ):
        opt.zero_grad()
        objective = gan_loss_d(disc(torch.cat(reals)), disc(torch.cat(fakes)), cfg.gan_mode)
        (-objective).backward()
        opt.step()

    state.iteration += 1
    term_floats = {k: float(v) / n for k, v in acc.items()}
    report = LossReport(**term_floats,
                        total=_report_total(term_floats, w, cfg.ablate),
                        iteration=state.iteration)
    for name, value in report.to_record().items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at iteration {state.iteration}: "
                               f"{name}={value} (report: {report.to_record()})")
    return report


def _param_names(bundle: GeneratorBundle) -> dict[int, str]:
    return {id(p): name for name, p in bundle.named_parameters()}


def _collect_tensors(state: TrainState) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
    tensors: dict[str, torch.Tensor] = {}
    for name, p in state.bundle.named_parameters():
        tensors[f"bundle/{name}"] = p.detach()
    for name, b in state.bundle.named_buffers():
        tensors[f"bundle_buffer/{name}"] = b.detach()
    names = _param_names(state.bundle)
    steps: dict[str, int] = {}
    for tag, opt in (("opt_g", state.opt_g), ("opt_d_s", state.opt_d_s),
                     ("opt_d_t", state.opt_d_t)):
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if not st:
                    continue
                pname = names[id(p)]
                tensors[f"{tag}/{pname}.exp_avg"] = st["exp_avg"].detach()
                tensors[f"{tag}/{pname}.exp_avg_sq"] = st["exp_avg_sq"].detach()
                steps[f"{tag}/{pname}"] = int(st["step"])
    # the global torch RNG is never consumed after construction (all init
    # uses local generators), so it is not part of the state
    return tensors, steps


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, steps = _collect_tensors(state)
    entries = []
    for name in sorted(tensors):
        t = tensors[name]
        entries.append({
            "name": name,
            "dtype": _DTYPE_CODES[t.dtype],
            "shape": list(t.shape),
        })
    header = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "extractor_seed": state.config.extractor_seed,
        "config": config_to_dict(state.config),
        "rng_state": state.rng.bit_generator.state,
        "opt_steps": steps,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for entry in entries:
            arr = tensors[entry["name"]].cpu().numpy()
            f.write(arr.astype(_CODE_NP[entry["dtype"]], copy=False).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            code = entry["dtype"]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.fromfile(f, dtype=_CODE_NP[code], count=count).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path: str | Path) -> TrainState:
    """Rebuild a full training state; save(load(x)) is byte-identical to x."""
    header, tensors = read_checkpoint(path)
    cfg = config_from_dict(header["config"])
    state = build_state(cfg)
    state.iteration = header["iteration"]

    with torch.no_grad():
        for name, p in state.bundle.named_parameters():
            p.copy_(tensors[f"bundle/{name}"])
        for name, b in state.bundle.named_buffers():
            b.copy_(tensors[f"bundle_buffer/{name}"])

    names = {name: p for name, p in state.bundle.named_parameters()}
    for tag, opt in (("opt_g", state.opt_g), ("opt_d_s", state.opt_d_s),
                     ("opt_d_t", state.opt_d_t)):
        for group in opt.param_groups:
            for p in group["params"]:
                pname = next(n for n, q in names.items() if q is p)
                key = f"{tag}/{pname}"
                if key not in header["opt_steps"]:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(float(header["opt_steps"][key])),
                    "exp_avg": tensors[f"{key}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
                }

    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = header["rng_state"]
    return state


def _truncate_log(log_path: Path, max_iter: int) -> None:
    if not log_path.exists():
        return
    kept = []
    with open(log_path, encoding="utf-8") as f:
        for line in f:
            if line.strip() and json.loads(line)["iter"] <= max_iter:
                kept.append(line)
    with open(log_path, "w", encoding="utf-8") as f:
        f.writelines(kept)


def train(cfg: TrainConfig | None = None, resume_from: str | Path | None = None,
          log_fn=None) -> Path:
    """Run the training loop; returns the final checkpoint path.

    ``resume_from`` restores the checkpointed state; the checkpoint's
    config must match ``cfg`` except for total_iters, checkpoint_every and
    out_dir.
    """
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if cfg is not None:
            stored = config_to_dict(state.config)
            wanted = config_to_dict(cfg)
            for key in ("total_iters", "checkpoint_every", "out_dir"):
                stored.pop(key), wanted.pop(key)
            if stored != wanted:
                raise ConfigError("resume config differs from checkpoint config")
            state.config = cfg
    elif cfg is not None:
        state = build_state(cfg)
    else:
        raise ConfigError("train needs a config or a checkpoint to resume")

    cfg = state.config
    corpus = toygen.Corpus(cfg.corpus)
    store = _ClipStore(corpus)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"
    if resume_from is not None:
        _truncate_log(log_path, state.iteration)
    elif log_path.exists():
        log_path.unlink()

    last_path = None
    with open(log_path, "a", encoding="utf-8") as log:
        while state.iteration < cfg.total_iters:
            batches = [sample_batch(store, state.rng, cfg) for _ in range(cfg.batch_size)]
            report = train_step(state, batches)
            log.write(json.dumps(report.to_record(), sort_keys=True) + "\n")
            log.flush()
            if log_fn is not None:
                log_fn(report)
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.total_iters:
                last_path = out_dir / f"checkpoint_{state.iteration:06d}.ckpt"
                save_checkpoint(state, last_path)
    if last_path is None:
        last_path = out_dir / f"checkpoint_{state.iteration:06d}.ckpt"
        save_checkpoint(state, last_path)
    return last_path
