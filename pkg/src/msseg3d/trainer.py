"""Training orchestration: branch students, EMA teachers, checkpoints.

Branch layout by ablation flags:
- use_mt=False: one student ("main"), supervised only, no teachers.
- use_mt=True, use_st=False: one student/teacher pair; the single student
  consumes both unlabeled subsets (classic mean-teacher).
- use_st=True: three students (main/mixed/other) and two teachers (mixed,
  other), each teacher the EMA of its own branch's student. The main student
  trains on labels only; branch students train on their subset's consistency
  term only. Optional soft parameter averaging couples the students.

Every optimizer step consumes batches derived purely from (seed, step), and
every perturbation is drawn from a per-step generator, so training is
deterministic and a resumed run replays the exact uninterrupted trajectory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import VNetLite, init_network
from .config import ExperimentConfig
from .consistency import gated_consistency_loss, mse_consistency_loss, supervised_loss
from .dataset import BatchSchedule
from .volumes import Volume

BRANCHES = ("main", "mixed", "other")


class TrainingAbort(RuntimeError):
    """Training cannot continue (non-finite loss, corrupt state)."""


class CheckpointError(RuntimeError):
    """Checkpoint directory is missing, incomplete, or inconsistent."""


def ema_update(teacher: nn.Module, student: nn.Module, decay: float) -> None:
    """theta_t <- decay * theta_t + (1 - decay) * theta_s, in place.

    decay=1 leaves the teacher untouched; decay=0 copies the student.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params) or any(
        tp.shape != sp.shape for tp, sp in zip(t_params, s_params)
    ):
        raise ValueError("teacher/student parameter shapes do not match")
    with torch.no_grad():
        for tp, sp in zip(t_params, s_params):
            tp.mul_(decay).add_(sp, alpha=1.0 - decay)


def total_loss(l_sup: float, l_u: float, l_h: float, alpha: float, beta: float) -> float:
    """Scalar objective l_sup + alpha*l_u + beta*l_h; aborts on non-finite input."""
    parts = {"l_sup": l_sup, "l_u": l_u, "l_h": l_h, "alpha": alpha, "beta": beta}
    bad = {k: v for k, v in parts.items() if not math.isfinite(v)}
    if bad:
        raise TrainingAbort(f"non-finite loss components: {bad}")
    return l_sup + alpha * l_u + beta * l_h


def build_network(config: ExperimentConfig, seed_material: tuple) -> VNetLite:
    net = VNetLite(
        class_count=config.data.class_count,
        in_channels=config.model.in_channels,
        base_channels=config.model.base_channels,
        depth=config.model.depth,
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material)))
    init_network(net, rng)
    return net


def parameters_digest(networks: dict[str, nn.Module]) -> str:
    """SHA-256 over all parameter bytes, keyed and ordered by network name."""
    h = hashlib.sha256()
    for name in sorted(networks):
        h.update(name.encode())
        for key, tensor in networks[name].state_dict().items():
            h.update(key.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def _network_file(role: str, branch: str) -> str:
    return f"{branch}.bin" if role == "student" else f"teacher-{branch}.bin"


def _write_blob(net: nn.Module, path: Path) -> list[list]:
    parts, index = [], []
    for key, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy().astype("<f4")
        parts.append(arr.tobytes())
        index.append([key, list(arr.shape)])
    path.write_bytes(b"".join(parts))
    return index


def _read_blob(net: nn.Module, path: Path, index: list[list]) -> None:
    blob = path.read_bytes()
    state, offset = {}, 0
    for key, shape in index:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: blob truncated at parameter {key}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        state[key] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    net.load_state_dict(state)


class ModelBundle:
    """The networks of a run plus enough config to run inference."""

    def __init__(
        self,
        config: ExperimentConfig,
        students: dict[str, VNetLite],
        teachers: dict[str, VNetLite],
        step: int = 0,
    ):
        self.config = config
        self.students = students
        self.teachers = teachers
        self.step = step

    def digest(self) -> str:
        nets = {f"student:{k}": v for k, v in self.students.items()}
        nets.update({f"teacher:{k}": v for k, v in self.teachers.items()})
        return parameters_digest(nets)

    def _input(self, volume: Volume) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))[None, None]

    def predict_probs(self, volume: Volume, mode: str = "main") -> np.ndarray:
        """Class probabilities (C, D, H, W): the main student's field, or the
        mean field over all students for mode='ensemble'."""
        if mode not in ("main", "ensemble"):
            raise ValueError(f"mode must be 'main' or 'ensemble', got {mode!r}")
        nets = (
            [self.students["main"]]
            if mode == "main"
            else [self.students[b] for b in BRANCHES if b in self.students]
        )
        x = self._input(volume)
        with torch.no_grad():
            fields = [net(x)[0] for net in nets]
        return torch.stack(fields).mean(dim=0).numpy()

    def predict(self, volume: Volume, mode: str = "main") -> np.ndarray:
        """Hard labels via argmax; ties go to the lower class id."""
        probs = self.predict_probs(volume, mode)
        return np.argmax(probs, axis=0).astype(np.uint16)

    def features(self, volume: Volume) -> np.ndarray:
        """Main student's deepest encoder activations, globally pooled."""
        with torch.no_grad():
            _, feats = self.students["main"](self._input(volume), return_features=True)
        return feats[0].numpy()


class Trainer:
    """Owns networks, optimizers, and the step counter for one run."""

    def __init__(
        self,
        config: ExperimentConfig,
        labeled: list[Volume],
        mixed: list[Volume],
        other: list[Volume],
    ):
        torch.use_deterministic_algorithms(True)
        self.config = config
        self.flags = config.flags
        tc = config.train
        if not labeled:
            raise ValueError("training requires labeled volumes")
        for v in labeled:
            if v.labels is None:
                raise ValueError(f"labeled pool sample {v.sample_id!r} has no labels")
        self.pools = {"labeled": labeled, "mixed": mixed, "other": other}
        self._tensors = {
            name: self._stack(vols) for name, vols in self.pools.items() if vols
        }
        self._labels = torch.from_numpy(
            np.stack([v.labels for v in labeled]).astype(np.int64)
        )
        self.schedule = BatchSchedule(
            tc.seed, len(labeled), len(mixed), len(other), tc.batch_size
        )
        self.step = 0

        # all students share one starting point; branches diverge through
        # their objectives, which keeps cross-student averaging meaningful
        init_material = (tc.seed, 101)
        self.students = {"main": build_network(config, init_material)}
        if self.flags.use_st:
            self.students["mixed"] = build_network(config, init_material)
            self.students["other"] = build_network(config, init_material)
        if self.flags.use_mt:
            teacher_branches = ("mixed", "other") if self.flags.use_st else ("main",)
            self.teachers = {
                b: copy.deepcopy(self.students[b if self.flags.use_st else "main"])
                for b in teacher_branches
            }
        else:
            self.teachers = {}
        for t in self.teachers.values():
            t.requires_grad_(False)
        self.optimizers = {
            name: torch.optim.Adam(net.parameters(), lr=tc.learning_rate)
            for name, net in self.students.items()
        }

    @staticmethod
    def _stack(volumes: list[Volume]) -> torch.Tensor:
        data = np.stack([v.data for v in volumes]).astype(np.float32)
        return torch.from_numpy(data)[:, None]  # (N, 1, D, H, W)

    @property
    def bundle(self) -> ModelBundle:
        return ModelBundle(self.config, self.students, self.teachers, self.step)

    def digest(self) -> str:
        return self.bundle.digest()

    # -- per-step machinery -------------------------------------------------

    def _perturb_rng(self, step: int) -> np.random.Generator:
        return np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.config.train.seed, 202, step)))
        )

    def _noise(self, rng: np.random.Generator, shape, sigma: float) -> torch.Tensor:
        return torch.from_numpy(sigma * rng.standard_normal(shape, dtype=np.float32))

    def _weak(self, x: torch.Tensor, rng) -> torch.Tensor:
        return x + self._noise(rng, tuple(x.shape), self.config.train.weak_noise)

    def _strong(self, x: torch.Tensor, rng) -> torch.Tensor:
        tc = self.config.train
        j = tc.strong_scale_jitter
        scale = rng.uniform(1.0 - j, 1.0 + j, size=(x.shape[0], 1, 1, 1, 1)).astype(np.float32)
        return x * torch.from_numpy(scale) + self._noise(rng, tuple(x.shape), tc.strong_noise)

    def _consistency(self, ps: torch.Tensor, pt: torch.Tensor):
        """Branch consistency loss plus (retained, total) region counts."""
        tc = self.config.train
        if self.flags.use_swc:
            loss, details = gated_consistency_loss(
                ps, pt, tc.region_size, tc.confidence_threshold, return_details=True
            )
            return loss, int(details["retained"].sum()), details["retained"].numel()
        return mse_consistency_loss(ps, pt), 0, 0

    def train_step(self) -> dict:
        """One optimizer step per active student; returns the log record."""
        tc = self.config.train
        idx = self.schedule.batches(self.step)
        rng = self._perturb_rng(self.step)

        lab = torch.from_numpy(idx["labeled"])
        x_l = self._tensors["labeled"][lab]
        y_l = self._labels[lab]
        l_sup = supervised_loss(self.students["main"](x_l), y_l)

        # consistency terms, fixed branch order for reproducible rng draws
        cons: dict[str, torch.Tensor] = {}
        retained, regions = 0, 0
        weights = {"mixed": tc.cons_weight_mixed, "other": tc.cons_weight_other}
        if self.flags.use_mt:
            for branch in ("mixed", "other"):
                if weights[branch] == 0.0 or idx[branch].size == 0:
                    continue
                x_b = self._tensors[branch][torch.from_numpy(idx[branch])]
                x_teacher = self._weak(x_b, rng)
                x_student = self._strong(x_b, rng)
                student = self.students[branch if self.flags.use_st else "main"]
                teacher = self.teachers[branch if self.flags.use_st else "main"]
                with torch.no_grad():
                    pt = teacher(x_teacher)
                ps = student(x_student)
                loss, kept, total = self._consistency(ps, pt)
                cons[branch] = loss
                retained += kept
                regions += total

        if not self.flags.use_st:
            objective = l_sup
            for branch, loss in cons.items():
                objective = objective + weights[branch] * loss
            opt = self.optimizers["main"]
            opt.zero_grad(set_to_none=True)
            objective.backward()
            opt.step()
        else:
            opt = self.optimizers["main"]
            opt.zero_grad(set_to_none=True)
            l_sup.backward()
            opt.step()
            for branch, loss in cons.items():
                opt = self.optimizers[branch]
                opt.zero_grad(set_to_none=True)
                (weights[branch] * loss).backward()
                opt.step()

        new_step = self.step + 1
        if (
            self.flags.use_st
            and tc.student_sync_rate > 0.0
            and new_step % tc.student_sync_interval == 0
        ):
            self._sync_students(tc.student_sync_rate)
        for branch, teacher in self.teachers.items():
            ema_update(teacher, self.students[branch], tc.ema_decay)
        self.step = new_step

        record = {"step": self.step, "l_sup": float(l_sup.detach())}
        if "other" in cons:
            record["l_u"] = float(cons["other"].detach())
        if "mixed" in cons:
            record["l_h"] = float(cons["mixed"].detach())
        record["l_total"] = total_loss(
            record["l_sup"], record.get("l_u", 0.0), record.get("l_h", 0.0),
            tc.cons_weight_other, tc.cons_weight_mixed,
        )
        # 1.0 when nothing was gated this step: no region was discarded
        record["retained_fraction"] = retained / regions if regions else 1.0
        return record

    def _sync_students(self, rate: float) -> None:
        """Soft parameter averaging: every student moves toward a weighted mean.

        The main student's weight is configurable. Raising it above 1 turns
        the average into "branches track main closely, main absorbs a small
        blend of what they learned" — with a symmetric mean, the consistency
        branches (whose teachers trail their own past states) drag the main
        student backwards along its trajectory faster than they feed useful
        structure forward.
        """
        names = [b for b in BRANCHES if b in self.students]
        nets = [self.students[b] for b in names]
        w_main = self.config.train.student_sync_main_weight
        weights = [w_main if b == "main" else 1.0 for b in names]
        total = sum(weights)
        with torch.no_grad():
            grouped = zip(*(n.parameters() for n in nets))
            for params in grouped:
                stacked = torch.stack([w * p for w, p in zip(weights, params)])
                mean = stacked.sum(dim=0) / total
                for p in params:
                    p.mul_(1.0 - rate).add_(mean, alpha=rate)

    # -- training loop + artifacts -------------------------------------------

    def run(self, run_dir: str | Path | None = None, epochs: int | None = None) -> dict:
        """Train for `epochs` (default: config value), logging metrics per step
        and checkpointing at start, end, and every checkpoint_every_steps."""
        tc = self.config.train
        epochs = tc.epochs if epochs is None else epochs
        run_dir = Path(run_dir) if run_dir is not None else None
        log_path = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            log_path = run_dir / "metrics.jsonl"
            self.save_checkpoint(run_dir)  # initial state, step 0 (or resume point)
        start_step = self.step
        log_f = open(log_path, "a") if log_path else None
        try:
            for _ in range(epochs):
                for _ in range(self.schedule.steps_per_epoch):
                    record = self.train_step()
                    if log_f:
                        log_f.write(json.dumps(record) + "\n")
                        log_f.flush()
                    if (
                        run_dir is not None
                        and tc.checkpoint_every_steps > 0
                        and self.step % tc.checkpoint_every_steps == 0
                    ):
                        self.save_checkpoint(run_dir)
        finally:
            if log_f:
                log_f.close()
        if run_dir is not None and self.step != start_step:
            self.save_checkpoint(run_dir)
        return {
            "steps": self.step - start_step,
            "final_step": self.step,
            "epochs": epochs,
            "final_checkpoint": str(run_dir / "ckpt" / f"step-{self.step}") if run_dir else None,
            "metrics_log": str(log_path) if log_path else None,
        }

    def save_checkpoint(self, run_dir: str | Path) -> Path:
        """Atomic checkpoint under run_dir/ckpt/step-<N>/."""
        final = Path(run_dir) / "ckpt" / f"step-{self.step}"
        tmp = final.with_name(final.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        networks = {}
        for role, nets in (("student", self.students), ("teacher", self.teachers)):
            for branch, net in nets.items():
                fname = _network_file(role, branch)
                index = _write_blob(net, tmp / fname)
                networks[fname] = {"role": role, "branch": branch, "params": index}
        optim_files = {}
        for branch, opt in self.optimizers.items():
            fname = f"optim-{branch}.pt"
            torch.save(opt.state_dict(), tmp / fname)
            optim_files[branch] = fname
        manifest = {
            "format": "msseg3d-checkpoint",
            "step": self.step,
            "config": self.config.as_dict(),
            "networks": networks,
            "optimizers": optim_files,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
        return final

    @classmethod
    def restore(
        cls,
        ckpt_dir: str | Path,
        labeled: list[Volume],
        mixed: list[Volume],
        other: list[Volume],
    ) -> "Trainer":
        """Rebuild a trainer whose continued trajectory is bit-identical to an
        uninterrupted run of the same config."""
        ckpt_dir = Path(ckpt_dir)
        manifest = _load_manifest(ckpt_dir)
        config = ExperimentConfig.from_dict(manifest["config"])
        trainer = cls(config, labeled, mixed, other)
        bundle = load_checkpoint(ckpt_dir)
        for branch, net in bundle.students.items():
            trainer.students[branch].load_state_dict(net.state_dict())
        for branch, net in bundle.teachers.items():
            trainer.teachers[branch].load_state_dict(net.state_dict())
        for branch, fname in manifest["optimizers"].items():
            state = torch.load(ckpt_dir / fname, weights_only=True)
            trainer.optimizers[branch].load_state_dict(state)
        trainer.step = int(manifest["step"])
        return trainer


def _load_manifest(ckpt_dir: Path) -> dict:
    path = ckpt_dir / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest.json in {ckpt_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "msseg3d-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    return manifest


def load_checkpoint(ckpt_dir: str | Path) -> ModelBundle:
    """Load the networks of a checkpoint for inference/analysis."""
    ckpt_dir = Path(ckpt_dir)
    manifest = _load_manifest(ckpt_dir)
    config = ExperimentConfig.from_dict(manifest["config"])
    students: dict[str, VNetLite] = {}
    teachers: dict[str, VNetLite] = {}
    for fname, info in manifest["networks"].items():
        net = VNetLite(
            class_count=config.data.class_count,
            in_channels=config.model.in_channels,
            base_channels=config.model.base_channels,
            depth=config.model.depth,
        )
        _read_blob(net, ckpt_dir / fname, info["params"])
        if info["role"] == "teacher":
            net.requires_grad_(False)
            teachers[info["branch"]] = net
        else:
            students[info["branch"]] = net
    if "main" not in students:
        raise CheckpointError(f"{ckpt_dir}: checkpoint lacks a main student")
    return ModelBundle(config, students, teachers, int(manifest["step"]))


def latest_checkpoint(run_dir: str | Path) -> Path:
    """The highest-step checkpoint in a run directory."""
    ckpt_root = Path(run_dir) / "ckpt"
    candidates = []
    if ckpt_root.is_dir():
        for child in ckpt_root.iterdir():
            if child.is_dir() and child.name.startswith("step-"):
                try:
                    candidates.append((int(child.name.split("-", 1)[1]), child))
                except ValueError:
                    continue
    if not candidates:
        raise CheckpointError(f"no checkpoints under {ckpt_root}")
    return max(candidates)[1]
