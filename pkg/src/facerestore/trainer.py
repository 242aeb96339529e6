"""Joint fine-tuning loop: five optimizer groups, freeze enforcement,
piecewise LR decay, deterministic batching, and bit-exact checkpointing.

Each iteration alternates a discriminator update (global critic plus the
three region critics on real vs detached fake) with a generator/codec update
on the combined objective. Every trainable parameter belongs to exactly one
optimizer group; frozen or ablated parameters are explicitly excluded and
never change. Batch sampling derives a fresh stream per iteration from the
run seed, so resuming from a checkpoint replays the exact same batches.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .codec import Decoder, Encoder, restoration_loss
from .config import (
    OPTIMIZER_GROUPS,
    RunConfig,
    config_hash,
    config_to_dict,
    derive_seed,
    run_config_from_dict,
)
from .container import read_container, write_container
from .degradation import read_manifest
from .discriminators import (
    ROI_REGIONS,
    FreezePlan,
    GlobalDiscriminator,
    LocalDiscriminator,
    apply_freeze,
    crop_rois_tensor,
    default_frozen_count,
    load_landmarks,
    roi_boxes,
)
from .errors import ConfigError, DataError, NumericError
from .generator import PriorGenerator
from .imaging import load_image, resize
from .losses import (
    ConvStackEmbedding,
    ConvStackExtractor,
    LossReport,
    adv_g_loss,
    adv_local_loss,
    build_extractors,
    discriminator_loss,
    feature_matching_loss,
    l1_loss,
    local_discriminator_loss,
    total_loss,
)
from .tensorops import image_to_tensor

__all__ = [
    "ModelSet",
    "PairDataset",
    "Trainer",
    "build_models",
    "build_optimizers",
    "lr_schedule",
    "export_module_parameters",
    "import_module_parameters",
    "save_extractor_pair",
    "load_extractor_pair",
]

LOCAL_NAMESPACES = {
    "left_eye": "disc_left_eye",
    "right_eye": "disc_right_eye",
    "mouth": "disc_mouth",
}


@dataclass
class ModelSet:
    """The trainable modules, keyed for checkpoint namespacing."""

    encoder: Encoder
    decoder: Decoder
    generator: PriorGenerator
    disc_global: GlobalDiscriminator
    disc_local: dict[str, LocalDiscriminator]

    def namespaces(self) -> dict[str, nn.Module]:
        table = {
            "codec/encoder": self.encoder,
            "codec/decoder": self.decoder,
            "generator": self.generator,
            "disc_global": self.disc_global,
        }
        for region, ns in LOCAL_NAMESPACES.items():
            table[ns] = self.disc_local[region]
        return table

    def parameter_table(self) -> dict[str, nn.Parameter]:
        return {
            f"{ns}/{name}": param
            for ns, module in self.namespaces().items()
            for name, param in module.named_parameters()
        }

    def eval_(self) -> "ModelSet":
        for module in self.namespaces().values():
            module.eval()
        return self


def build_models(cfg: RunConfig) -> ModelSet:
    """Construct all networks with a seed derived from the run seed."""
    torch.manual_seed(derive_seed(cfg.seed, "model-init"))
    codec_cfg = cfg.model.codec_config(use_mmrb=cfg.train.use_mmrb)
    encoder = Encoder(codec_cfg)
    decoder = Decoder(codec_cfg)
    generator = PriorGenerator(cfg.model.generator_config())
    disc_global = GlobalDiscriminator(
        cfg.model.base_resolution,
        channel_base=cfg.model.disc_channel_base,
        channel_max=cfg.model.disc_channel_max,
    )
    disc_local = {
        region: LocalDiscriminator(
            cfg.model.roi_size,
            channel_base=cfg.model.local_channel_base,
            channel_max=cfg.model.local_channel_max,
        )
        for region in ROI_REGIONS
    }
    return ModelSet(encoder, decoder, generator, disc_global, disc_local)


def lr_schedule(
    iteration: int,
    total_iterations: int,
    milestones: tuple[float, ...] = (0.6, 0.8),
    factor: float = 0.5,
) -> float:
    """Piecewise decay multiplier: 1.0 before the first milestone, times
    factor after each milestone fraction of the total is passed."""
    if not 0 <= iteration < max(total_iterations, 1):
        raise ConfigError(f"iteration {iteration} outside [0, {total_iterations})")
    passed = sum(1 for m in milestones if iteration >= m * total_iterations)
    return factor**passed


def assign_parameter_groups(
    models: ModelSet, train_cfg, freeze_plan: FreezePlan
) -> tuple[dict[str, list[str]], dict[str, str]]:
    """Partition every parameter into one optimizer group or the excluded set.

    Returns ({group: sorted names}, {excluded name: reason}). Raises on any
    parameter that ends up unassigned.
    """
    table = models.parameter_table()
    frozen = {f"disc_global/{n}" for n in freeze_plan.parameter_names}
    prior_names = {f"generator/{n}" for n in models.generator.prior_parameter_names()}
    fuse_names = {f"generator/{n}" for n in models.generator.noise_branch_parameter_names()}
    local_ns = tuple(f"{ns}/" for ns in LOCAL_NAMESPACES.values())

    groups: dict[str, list[str]] = {g: [] for g in OPTIMIZER_GROUPS}
    excluded: dict[str, str] = {}
    for name in table:
        if name.startswith("codec/"):
            groups["codec"].append(name)
        elif name in fuse_names:
            groups["noise_branches"].append(name)
        elif name in prior_names:
            if train_cfg.finetune_prior:
                groups["generator"].append(name)
            else:
                excluded[name] = "prior frozen (finetune_prior=False)"
        elif name.startswith("disc_global/"):
            if name in frozen:
                excluded[name] = "frozen by FreezeD plan"
            else:
                groups["disc_global"].append(name)
        elif name.startswith(local_ns):
            if train_cfg.use_local_d:
                groups["disc_local"].append(name)
            else:
                excluded[name] = "local discriminators disabled"
        else:
            raise ConfigError(f"parameter {name!r} not assigned to any optimizer group")

    assigned = [n for names in groups.values() for n in names]
    if len(assigned) != len(set(assigned)):
        raise ConfigError("a parameter was assigned to more than one optimizer group")
    if set(assigned) | set(excluded) != set(table) or set(assigned) & set(excluded):
        raise ConfigError("parameter partition does not cover the model exactly once")
    return {g: sorted(names) for g, names in groups.items()}, excluded


def build_optimizers(
    train_cfg, groups: dict[str, list[str]], table: dict[str, nn.Parameter]
) -> dict[str, torch.optim.Adam]:
    """One Adam per non-empty group, at the configured learning rate."""
    optimizers = {}
    for group in OPTIMIZER_GROUPS:
        names = groups.get(group, [])
        if not names:
            continue
        params = [table[name] for name in names]
        optimizers[group] = torch.optim.Adam(
            params,
            lr=train_cfg.learning_rates[group],
            betas=tuple(train_cfg.adam_betas),
            eps=train_cfg.adam_eps,
            foreach=True,
        )
    return optimizers


class PairDataset:
    """LQ/HQ pairs from a synthesis manifest, with per-pair ROI boxes."""

    def __init__(
        self,
        pairs_dir: str | Path,
        base_resolution: int,
        roi_margin: float = 0.15,
        landmarks_path: str | Path | None = None,
    ):
        pairs_dir = Path(pairs_dir)
        self.base = base_resolution
        records = read_manifest(pairs_dir / "manifest.jsonl")
        landmark_table = load_landmarks(landmarks_path) if landmarks_path else {}

        self.lq: list[torch.Tensor] = []
        self.hq: list[torch.Tensor] = []
        self.boxes: list[dict[str, tuple[int, int, int, int]]] = []
        for rec in records:
            lq = self._load(pairs_dir / rec["lq_path"])
            hq = self._load(pairs_dir / rec["hq_path"])
            self.lq.append(lq)
            self.hq.append(hq)
            points = landmark_table.get(rec["hq_path"]) or landmark_table.get(
                rec.get("source", "")
            )
            self.boxes.append(
                roi_boxes(base_resolution, base_resolution, points, roi_margin)
            )

    def _load(self, path: Path) -> torch.Tensor:
        img = load_image(path)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if img.shape[:2] != (self.base, self.base):
            img = resize(img, self.base, self.base, "bicubic")
        return image_to_tensor(img)

    def __len__(self) -> int:
        return len(self.lq)

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor, list[dict]]:
        lq = torch.stack([self.lq[i] for i in indices])
        hq = torch.stack([self.hq[i] for i in indices])
        boxes = [self.boxes[i] for i in indices]
        return lq, hq, boxes


class Trainer:
    """Owns the models, extractors, optimizer groups, and the step loop."""

    def __init__(
        self,
        cfg: RunConfig,
        pairs_dir: str | Path | None = None,
        log_path: str | Path | None = None,
    ):
        self.cfg = cfg.validate()
        self.models = build_models(cfg)
        self.perceptual, self.face_embed = build_extractors(
            cfg.extractor_profile,
            seed=derive_seed(cfg.seed, "extractors") % (2**31),
            container=cfg.paths.extractor_container,
        )

        if cfg.train.freeze_d:
            n_frozen = (
                cfg.train.n_frozen
                if cfg.train.n_frozen is not None
                else default_frozen_count(self.models.disc_global)
            )
            self.freeze_plan = apply_freeze(self.models.disc_global, n_frozen)
        else:
            self.freeze_plan = FreezePlan(0, [], [])

        self.param_table = self.models.parameter_table()
        self.groups, self.excluded = assign_parameter_groups(
            self.models, cfg.train, self.freeze_plan
        )
        for name in self.excluded:
            self.param_table[name].requires_grad_(False)
        self.optimizers = build_optimizers(cfg.train, self.groups, self.param_table)

        self.dataset = (
            PairDataset(
                pairs_dir,
                cfg.model.base_resolution,
                cfg.model.roi_margin,
                cfg.paths.landmarks,
            )
            if pairs_dir is not None
            else None
        )
        self.iteration = 0
        self.reports: list[LossReport] = []
        self.log_path = Path(log_path) if log_path else None

    # ------------------------------------------------------------------ forward

    def restore(self, lq: torch.Tensor) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """LQ batch -> (restored batch, per-scale decoder reconstructions)."""
        state = self.models.encoder(lq)
        noise, recons = self.models.decoder(state)
        w = self.models.generator.map_latent(state.latent)
        fake = self.models.generator.synthesize(w, noise)
        return fake, recons

    # ------------------------------------------------------------------ stepping

    def _crop_rois(self, imgs: torch.Tensor, boxes: list[dict]) -> dict[str, torch.Tensor]:
        roi = self.cfg.model.roi_size
        if all(b == boxes[0] for b in boxes[1:]):
            return crop_rois_tensor(imgs, boxes[0], roi)
        per_region = {region: [] for region in ROI_REGIONS}
        for i, b in enumerate(boxes):
            crops = crop_rois_tensor(imgs[i : i + 1], b, roi)
            for region in ROI_REGIONS:
                per_region[region].append(crops[region])
        return {region: torch.cat(chunks) for region, chunks in per_region.items()}

    def _apply_lr(self) -> float:
        mult = lr_schedule(
            self.iteration,
            self.cfg.train.total_iterations,
            self.cfg.train.decay_milestones,
            self.cfg.train.decay_factor,
        )
        for group, opt in self.optimizers.items():
            for pg in opt.param_groups:
                pg["lr"] = self.cfg.train.learning_rates[group] * mult
        return mult

    def train_step(
        self, lq: torch.Tensor, hq: torch.Tensor, boxes: list[dict] | None = None
    ) -> LossReport:
        """One alternating discriminator/generator update on a batch."""
        cfg = self.cfg
        if boxes is None:
            base = cfg.model.base_resolution
            boxes = [roi_boxes(base, base, None, cfg.model.roi_margin)] * lq.shape[0]
        mult = self._apply_lr()

        fake, recons = self.restore(lq)

        # --- discriminator side
        d_g = discriminator_loss(
            self.models.disc_global(hq), self.models.disc_global(fake.detach())
        )
        if cfg.train.r1_gamma > 0:
            hq_r1 = hq.detach().requires_grad_(True)
            real_logit = self.models.disc_global(hq_r1)
            (grad,) = torch.autograd.grad(real_logit.sum(), hq_r1, create_graph=True)
            d_g = d_g + cfg.train.r1_gamma / 2 * grad.pow(2).flatten(1).sum(1).mean()
        d_total = d_g
        d_l_value = 0.0
        if cfg.train.use_local_d:
            real_rois = self._crop_rois(hq, boxes)
            fake_rois = self._crop_rois(fake.detach(), boxes)
            d_l = None
            for region in ROI_REGIONS:
                disc = self.models.disc_local[region]
                term = local_discriminator_loss(disc(real_rois[region]), disc(fake_rois[region]))
                d_l = term if d_l is None else d_l + term
            d_total = d_total + d_l
            d_l_value = float(d_l.detach())

        disc_groups = [g for g in ("disc_global", "disc_local") if g in self.optimizers]
        for g in disc_groups:
            self.optimizers[g].zero_grad(set_to_none=True)
        d_total.backward()
        for g in disc_groups:
            self.optimizers[g].step()

        # --- generator side
        adv_g = adv_g_loss(self.models.disc_global(fake))
        if cfg.train.use_local_d:
            gen_rois = self._crop_rois(fake, boxes)
            probs = {
                region: self.models.disc_local[region](gen_rois[region])
                for region in ROI_REGIONS
            }
            adv_l = adv_local_loss(probs)
        else:
            adv_l = fake.new_zeros(())
        l1 = l1_loss(hq, fake)
        fm = feature_matching_loss(hq, fake, self.perceptual)
        fp = (self.face_embed(hq) - self.face_embed(fake)).abs().mean()
        rec = restoration_loss(recons, hq, weight=1.0)

        w = cfg.loss
        total = (
            w.adv_global * adv_g.double()
            + w.adv_local * adv_l.double()
            + w.l1 * l1.double()
            + w.feature_match * fm.double()
            + w.face * fp.double()
            + w.reconstruction * rec.double()
        )
        if not torch.isfinite(total):
            raise NumericError(
                "non-finite training loss at iteration "
                f"{self.iteration}: adv_g={float(adv_g)}, adv_l={float(adv_l)}, "
                f"l1={float(l1)}, fm={float(fm)}, fp={float(fp)}, rec={float(rec)}"
            )

        gen_groups = [g for g in ("codec", "generator", "noise_branches") if g in self.optimizers]
        for g in gen_groups:
            self.optimizers[g].zero_grad(set_to_none=True)
        total.backward()
        for g in gen_groups:
            self.optimizers[g].step()

        report = total_loss(
            float(adv_g.detach()),
            float(adv_l.detach()),
            float(l1.detach()),
            float(fm.detach()),
            float(fp.detach()),
            float(rec.detach()),
            w,
            d_global=float(d_g.detach()),
            d_local=d_l_value,
        )
        if abs(report.total - float(total.detach())) > 1e-6:
            raise NumericError(
                f"report total {report.total} diverges from optimized loss {float(total.detach())}"
            )
        self.iteration += 1
        self.reports.append(report)
        self._log(report, mult)
        return report

    def _log(self, report: LossReport, mult: float) -> None:
        if self.log_path is None:
            return
        record = {"iteration": self.iteration - 1, "lr_multiplier": mult}
        record.update(asdict(report))
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _batch_indices(self) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.cfg.seed, f"batch/{self.iteration}"))
        return rng.integers(0, len(self.dataset), self.cfg.train.batch_size)

    def run(
        self,
        iterations: int | None = None,
        checkpoint_dir: str | Path | None = None,
    ) -> list[LossReport]:
        """Train until total_iterations (or the given target), checkpointing
        at the configured interval and at the end."""
        if self.dataset is None:
            raise ConfigError("trainer was built without a pairs directory")
        if len(self.dataset) == 0:
            raise DataError("training dataset is empty")
        target = self.cfg.train.total_iterations if iterations is None else iterations
        checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        if checkpoint_dir:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
        while self.iteration < target:
            lq, hq, boxes = self.dataset.batch(self._batch_indices())
            self.train_step(lq, hq, boxes)
            if checkpoint_dir and (
                self.iteration % self.cfg.train.checkpoint_interval == 0
                or self.iteration == target
            ):
                self.save_checkpoint(checkpoint_dir / f"checkpoint_{self.iteration:07d}.ckpt")
        return self.reports

    # ------------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path: str | Path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, param in self.param_table.items():
            arrays[name] = param.detach().cpu().numpy().astype(np.float32)
        adam_steps: dict[str, dict[str, float]] = {}
        for group, opt in self.optimizers.items():
            steps: dict[str, float] = {}
            for name in self.groups[group]:
                state = opt.state.get(self.param_table[name])
                if not state:
                    continue
                arrays[f"optim/{group}/{name}/exp_avg"] = (
                    state["exp_avg"].cpu().numpy().astype(np.float32)
                )
                arrays[f"optim/{group}/{name}/exp_avg_sq"] = (
                    state["exp_avg_sq"].cpu().numpy().astype(np.float32)
                )
                steps[name] = float(state["step"])
            adam_steps[group] = steps
        arrays["rng/torch_cpu"] = torch.get_rng_state().numpy().astype(np.uint8)
        extra = {
            "kind": "checkpoint",
            "iteration": self.iteration,
            "config": config_to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "adam_steps": adam_steps,
        }
        write_container(path, arrays, extra)

    @classmethod
    def load_checkpoint(
        cls,
        path: str | Path,
        pairs_dir: str | Path | None = None,
        log_path: str | Path | None = None,
        run_config: RunConfig | None = None,
        allow_config_mismatch: bool = False,
    ) -> "Trainer":
        extra, arrays = read_container(path)
        if extra.get("kind") != "checkpoint":
            raise DataError(f"{path} is not a training checkpoint")
        cfg = run_config_from_dict(extra["config"])
        if run_config is not None and config_hash(run_config) != extra["config_hash"]:
            warnings.warn(
                "checkpoint config differs from the provided run config; "
                "resuming with the checkpoint's config",
                stacklevel=2,
            )
            if not allow_config_mismatch:
                raise ConfigError(
                    "config hash mismatch on resume; pass allow_config_mismatch=True "
                    "to resume with the checkpoint's stored config"
                )
        trainer = cls(cfg, pairs_dir=pairs_dir, log_path=log_path)

        with torch.no_grad():
            for name, param in trainer.param_table.items():
                if name not in arrays:
                    raise DataError(f"checkpoint missing parameter {name!r}")
                arr = arrays[name]
                if tuple(arr.shape) != tuple(param.shape):
                    raise DataError(
                        f"checkpoint parameter {name!r} has shape {arr.shape}, "
                        f"model expects {tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(arr))

        adam_steps = extra.get("adam_steps", {})
        for group, opt in trainer.optimizers.items():
            for name in trainer.groups[group]:
                key = f"optim/{group}/{name}"
                if f"{key}/exp_avg" not in arrays:
                    continue
                param = trainer.param_table[name]
                opt.state[param] = {
                    "step": torch.tensor(float(adam_steps[group][name])),
                    "exp_avg": torch.from_numpy(arrays[f"{key}/exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"{key}/exp_avg_sq"].copy()),
                }
        trainer.iteration = int(extra["iteration"])
        if "rng/torch_cpu" in arrays:
            torch.set_rng_state(torch.from_numpy(arrays["rng/torch_cpu"].copy()))
        return trainer


# ---------------------------------------------------------------- weight import


def export_module_parameters(module: nn.Module, path: str | Path, kind: str = "module") -> None:
    """Write a module's parameters to a container for later import."""
    arrays = {
        name: param.detach().cpu().numpy().astype(np.float32)
        for name, param in module.named_parameters()
    }
    write_container(path, arrays, {"kind": kind})


def import_module_parameters(
    module: nn.Module, path: str | Path, name_map: dict[str, str] | None = None
) -> list[str]:
    """Copy externally supplied parameters onto a module.

    name_map translates this module's parameter names to container entry
    names. Every module parameter must resolve; shapes must match.
    """
    _, arrays = read_container(path)
    name_map = name_map or {}
    loaded = []
    with torch.no_grad():
        for name, param in module.named_parameters():
            source = name_map.get(name, name)
            if source not in arrays:
                raise DataError(f"container {path} has no entry {source!r} for parameter {name!r}")
            arr = arrays[source]
            if tuple(arr.shape) != tuple(param.shape):
                raise DataError(
                    f"entry {source!r} shape {arr.shape} does not match parameter "
                    f"{name!r} shape {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr))
            loaded.append(name)
    return loaded


def save_extractor_pair(
    path: str | Path, perceptual: ConvStackExtractor, face: ConvStackEmbedding
) -> None:
    """Persist a perceptual/face extractor pair as a pretrained-profile container."""
    arrays = {}
    for prefix, module in (("perceptual", perceptual), ("face", face)):
        for name, param in module.named_parameters():
            arrays[f"{prefix}/{name}"] = param.detach().cpu().numpy().astype(np.float32)
    extra = {
        "kind": "extractor_pair",
        "perceptual": perceptual.spec,
        "face": face.stack.spec,
    }
    write_container(path, arrays, extra)


def load_extractor_pair(path: str | Path) -> tuple[ConvStackExtractor, ConvStackEmbedding]:
    extra, arrays = read_container(path)
    if extra.get("kind") != "extractor_pair":
        raise DataError(f"{path} is not an extractor container")
    perceptual = ConvStackExtractor(**extra["perceptual"])
    face = ConvStackEmbedding(**extra["face"])
    with torch.no_grad():
        for prefix, module in (("perceptual", perceptual), ("face", face)):
            for name, param in module.named_parameters():
                key = f"{prefix}/{name}"
                if key not in arrays:
                    raise DataError(f"extractor container missing {key!r}")
                param.copy_(torch.from_numpy(arrays[key]))
    for p in list(perceptual.parameters()) + list(face.parameters()):
        p.requires_grad_(False)
    return perceptual, face
