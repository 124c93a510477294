import logging
import math
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from bimask_search.engine import EngineError, NonFiniteError
from bimask_search.engine import functional as F
from bimask_search.engine.optim import Adam
from bimask_search.models.vit import ToyViT, count_parameters, patchify, reconstruct_loss
from bimask_search.search.bimask import LambdaSchedule, compute_bimasks, harden, trajectory_snapshot
from bimask_search.search.cost_model import calibrate, g_of_V, widths_report
from bimask_search.search.pmim import MaskingSchedule, gamma, sample_mask
from bimask_search.search.pruner import PruneSchedule, finalize, finish_check, maybe_prune
from bimask_search.search.regularizers import total_mask_loss
from bimask_search.search.space import build_space, export_architecture
from bimask_search.training.search_log import SearchLog

logger = logging.getLogger(__name__)

FINISHED = "finished"
BUDGET_MISS = "budget-miss"
EVAL_BATCH = 250


class DivergenceError(Exception):
    """Non-finite loss or weights; carries the last good weight snapshot"""

    def __init__(self, message, step, snapshot):
        self.step = step
        self.snapshot = snapshot
        super().__init__(f"diverged at iteration {step}: {message}")


@dataclass
class SearchResult:
    status: str
    log: SearchLog
    architecture: dict
    model: ToyViT
    space: object
    events: list = field(default_factory=list)
    g_fraction: float = 1.0
    iterations: int = 0


def iterate_batches(n, batch_size, rng):
    """Shuffled index batches covering 0..n-1 once"""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train_supervised(model, patches, labels, epochs, trainer_config, seed, desc):
    """Plain cross-entropy training without masks; returns per-epoch mean losses"""
    history = []
    if epochs <= 0:
        return history
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parameters(include_decoder=False), lr=trainer_config.lr_main,
                     weight_decay=trainer_config.weight_decay)
    snapshot = model.state_dict()
    step = 0
    for epoch in tqdm(range(epochs), desc=desc, leave=False):
        losses = []
        for idx in iterate_batches(len(labels), trainer_config.batch_size, rng):
            try:
                loss = F.cross_entropy(model.forward(patches[idx]).logits, labels[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            except NonFiniteError as e:
                raise DivergenceError(str(e), step, snapshot) from e
            losses.append(loss.item())
            step += 1
        snapshot = model.state_dict()
        history.append(float(np.mean(losses)))
        logger.debug(f"{desc} epoch {epoch}: loss {history[-1]:.4f}")
    return history


def pretrain(config, model, data):
    """
    Supervised training of the unmasked supernet before the search

    Returns:
        list: Mean training loss per epoch
    """
    patches = patchify(data.train_images, config.model.patch_size)
    history = _train_supervised(model, patches, data.train_labels, config.trainer.pretrain_epochs,
                                config.trainer, config.trainer.seed, "pretrain")
    if history:
        logger.info(f"Pretraining done: loss {history[0]:.4f} -> {history[-1]:.4f}")
    return history


def evaluate(model, data, split="eval"):
    """
    Deterministic top-1 accuracy and loss over a split

    Returns:
        dict: accuracy, loss, n, counted parameters and the model's cost report
    """
    images = getattr(data, f"{split}_images")
    labels = getattr(data, f"{split}_labels")
    if images.shape[1:] != (model.config.in_chans, model.config.image_size, model.config.image_size):
        raise EngineError(f"evaluate: images {images.shape[1:]} do not fit the model input")
    patches = patchify(images, model.config.patch_size)
    correct = 0
    total_loss = 0.0
    for start in range(0, len(labels), EVAL_BATCH):
        batch = slice(start, start + EVAL_BATCH)
        logits = model.forward(patches[batch]).logits
        total_loss += F.cross_entropy(logits, labels[batch]).item() * len(labels[batch])
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[batch]))
    metrics = {
        "accuracy": correct / len(labels),
        "loss": total_loss / len(labels),
        "n": int(len(labels)),
        "parameters": count_parameters(model),
        "cost": widths_report(model.config, model.widths()),
    }
    if metrics["parameters"] != metrics["cost"]["params"]:
        logger.warning(f"Counted {metrics['parameters']} parameters but the cost model expects {metrics['cost']['params']}")
    logger.info(f"Evaluation on {split}: accuracy {metrics['accuracy']:.4f}, loss {metrics['loss']:.4f}")
    return metrics


def retrain(config, model, data):
    """
    Fine-tune a materialized model without masks, regularizers or masking

    Returns:
        dict: accuracy/loss before and after plus the loss history
    """
    before = evaluate(model, data)
    patches = patchify(data.train_images, config.model.patch_size)
    history = _train_supervised(model, patches, data.train_labels, config.trainer.retrain_epochs,
                                config.trainer, config.trainer.seed + 1, "retrain")
    after = evaluate(model, data) if history else before
    logger.info(f"Retraining: accuracy {before['accuracy']:.4f} -> {after['accuracy']:.4f}")
    return {
        "accuracy_before": before["accuracy"],
        "accuracy_after": after["accuracy"],
        "loss_before": before["loss"],
        "loss_after": after["loss"],
        "epochs": config.trainer.retrain_epochs,
        "history": history,
        "cost": after["cost"],
    }


def _iter_record(t, epoch, lam, gam, l_task, l_rec, parts, n_masked):
    record = {"type": "iter", "t": t, "epoch": epoch, "lambda": lam, "gamma": gam,
              "loss_task": l_task, "loss_rec": l_rec, "masked": n_masked}
    record.update(parts)
    return record


def search(config, space, model, data, coeffs):
    """
    Joint search of weights, importance scores and architecture logits

    Each iteration masks a batch at ratio γ(t), runs the supernet under the
    current bi-masks, minimizes task + mask-regularization + reconstruction
    loss with separate optimizers for the weights and for {α, S}, then
    checks the pruning trigger and the finish condition.

    Args:
        config: RunConfig
        space: SearchSpace from build_space (modified in place)
        model: Full-width ToyViT (trained in place)
        data: SyntheticDataset
        coeffs: Calibrated CostCoefficients

    Returns:
        SearchResult

    Raises:
        DivergenceError: Non-finite loss; carries the last good weights
    """
    tc, reg = config.trainer, config.regularizers
    patches = patchify(data.train_images, config.model.patch_size)
    labels = data.train_labels
    n_patches = config.model.n_patches

    iters_per_epoch = math.ceil(len(labels) / tc.batch_size)
    total_iters = tc.epochs * iters_per_epoch
    warmup_iters = tc.warmup_epochs * iters_per_epoch
    lam_schedule = LambdaSchedule(total_iters)
    mask_schedule = MaskingSchedule.from_config(config.pmim, total_iters)
    prune_schedule = PruneSchedule.for_epoch(iters_per_epoch, tc.prune_per_epoch, reg.eta, warmup_iters)

    main_opt = Adam(model.parameters(), lr=tc.lr_main, weight_decay=tc.weight_decay)
    score_opt = Adam(space.parameters(), lr=tc.lr_score, betas=(tc.beta1_score, 0.999))
    rng = np.random.default_rng(tc.seed)

    log = SearchLog()
    events = []
    snapshot = model.state_dict()
    status = BUDGET_MISS
    g_now = g_of_V(space, coeffs).item()
    t = 0
    logger.info(f"Search: {tc.epochs} epochs x {iters_per_epoch} iterations, warmup {warmup_iters}, "
                f"prune interval {prune_schedule.interval}, tau={tc.tau}")

    for epoch in tqdm(range(tc.epochs), desc="search", leave=False):
        for idx in iterate_batches(len(labels), tc.batch_size, rng):
            finished = space.finished
            lam = lam_schedule.value(t)
            if not finished:
                gam = gamma(mask_schedule, t)
            else:
                gam = gamma(mask_schedule, total_iters) if tc.keep_rec_after_finish else 0.0
            mask = sample_mask(n_patches, gam, rng)
            batch = patches[idx]
            try:
                bimasks = harden(space) if finished else compute_bimasks(space, lam)
                output = model.forward(batch, bimasks, mask)
                l_task = F.cross_entropy(output.logits, labels[idx])
                l_rec = reconstruct_loss(output, batch)
                loss = l_task + l_rec
                parts = {}
                if not finished:
                    l_m, parts, _ = total_mask_loss(space, reg, tc.tau, coeffs)
                    loss = loss + l_m
                main_opt.zero_grad()
                score_opt.zero_grad()
                loss.backward()
                main_opt.step()
                if not finished:
                    score_opt.step()
            except NonFiniteError as e:
                logger.error(f"Non-finite value at iteration {t}: {e}")
                raise DivergenceError(str(e), t, snapshot) from e

            log.append(_iter_record(t, epoch, lam, gam, l_task.item(), l_rec.item(), parts, int(mask.sum())))
            t += 1
            if finished:
                continue

            new_events = maybe_prune(space, prune_schedule, t, score_opt)
            for event in new_events:
                log.append(event.to_record())
            events.extend(new_events)
            g_now = g_of_V(space, coeffs).item()
            if t >= warmup_iters and finish_check(space, g_now, tc.tau, tc.finish_tolerance, prune_schedule):
                closing = finalize(space, t, score_opt)
                for event in closing:
                    log.append(event.to_record())
                events.extend(closing)
                lam_schedule.finish(t)
                g_now = g_of_V(space, coeffs).item()
                status = FINISHED
                log.append({"type": "finish", "t": t, "g": g_now})
                if not tc.continue_after_finish:
                    break

        snapshot = model.state_dict()
        view = compute_bimasks(space, lam_schedule.value(t))
        log.append({"type": "epoch", "epoch": epoch, "t": t, "g": g_now,
                    "submodules": trajectory_snapshot(space, view)})
        if space.finished and not tc.continue_after_finish:
            break

    if status != FINISHED:
        logger.warning(f"Budget missed: g={g_now:.4f} after {t} iterations (tau={tc.tau}); hardening at argmax")
        closing = finalize(space, t, score_opt)
        for event in closing:
            log.append(event.to_record())
        events.extend(closing)
        space.finished = True
        g_now = g_of_V(space, coeffs).item()
        log.append({"type": "budget-miss", "t": t, "g": g_now})

    architecture = export_architecture(space)
    log.append({"type": "architecture", "status": status, "submodules": architecture["submodules"]})
    logger.info(f"Search {status} at iteration {t}: g={g_now:.4f}, {len(events)} prune events")
    return SearchResult(status, log, architecture, model, space, events, g_now, t)


def run_search(config, data, init_state=None):
    """
    Build, optionally pretrain, and search a fresh supernet

    Args:
        config: RunConfig
        data: SyntheticDataset
        init_state: Optional weight dict to start from instead of pretraining

    Returns:
        tuple: (SearchResult, pretrain loss history)
    """
    tc = config.trainer
    model = ToyViT(config.model, seed=tc.seed)
    history = []
    if init_state is not None:
        model.load_state_dict(init_state)
        logger.info("Search starts from the supplied weights")
    else:
        history = pretrain(config, model, data)
    space = build_space(config.model, config.space, seed=tc.seed, alpha_init=tc.alpha_init,
                        init_std=tc.init_std, sharing=tc.sharing)
    coeffs = calibrate(config.model, seed=tc.seed)
    return search(config, space, model, data, coeffs), history
