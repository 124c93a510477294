import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from bimask_search.engine import Tensor
from bimask_search.engine import functional as F

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class SiteAlignmentError(Exception):
    """A mask or architecture entry does not line up with the model's prunable sites"""

    def __init__(self, site, detail):
        self.site = site
        super().__init__(f"site {site}: {detail}")


class MaterializationError(Exception):
    """The search space cannot be turned into a dense model yet"""


@dataclass
class MaskedForwardOutput:
    logits: Tensor
    reconstruction: Optional[Tensor]
    mask_positions: Optional[np.ndarray]


def patchify(images, patch_size):
    """
    Split images into flattened non-overlapping patches

    Args:
        images: Array [n, channels, H, W]
        patch_size: Patch side in pixels

    Returns:
        np.ndarray: [n, (H/p)·(W/p), channels·p²]
    """
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    p = patch_size
    x = images.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def init_params(config, seed=0):
    """Named weights of the full-width supernet, decoder included"""
    rng = np.random.default_rng(seed)
    c, hd, f = config.embed_dim, config.heads * config.head_dim, config.mlp_dim
    pp, n, k = config.patch_pixels, config.n_patches, config.classes

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    params = {
        "patch_embed.weight": normal(pp, c),
        "patch_embed.bias": np.zeros(c),
        "pos_embed": normal(n, c),
        "mask_token": normal(c),
    }
    for layer in range(config.depth):
        prefix = f"blocks.{layer}"
        for name in ("q", "k", "v"):
            params[f"{prefix}.attn.{name}.weight"] = normal(c, hd)
            params[f"{prefix}.attn.{name}.bias"] = np.zeros(hd)
        params[f"{prefix}.attn.proj.weight"] = normal(hd, c)
        params[f"{prefix}.attn.proj.bias"] = np.zeros(c)
        params[f"{prefix}.mlp.fc1.weight"] = normal(c, f)
        params[f"{prefix}.mlp.fc1.bias"] = np.zeros(f)
        params[f"{prefix}.mlp.fc2.weight"] = normal(f, c)
        params[f"{prefix}.mlp.fc2.bias"] = np.zeros(c)
    params["head.weight"] = normal(c, k)
    params["head.bias"] = np.zeros(k)
    params["decoder.weight"] = normal(c, pp)
    params["decoder.bias"] = np.zeros(pp)
    return params


class ToyViT:
    """
    Mean-pooled ViT with soft-mask insertion points and a per-patch pixel decoder

    The same class serves the full supernet and materialized pruned models;
    layers records the kept (heads, per-head channels) of each block.
    """

    def __init__(self, config, params=None, layers=None, seed=0):
        self.config = config
        raw = init_params(config, seed) if params is None else params
        self.params = {name: Tensor(value, requires_grad=True) for name, value in raw.items()}
        self.layers = layers or [{"heads": config.heads, "head_dim": config.head_dim} for _ in range(config.depth)]
        self.scale = 1.0 / math.sqrt(config.head_dim)

    def __getitem__(self, name):
        return self.params[name]

    @property
    def embed_dim(self):
        return self.params["patch_embed.weight"].shape[1]

    def widths(self):
        """Kept units per prunable site"""
        widths = {"patch_embed": self.embed_dim}
        for layer, info in enumerate(self.layers):
            widths[f"blocks.{layer}.qkv"] = info["head_dim"]
            widths[f"blocks.{layer}.heads"] = info["heads"]
            widths[f"blocks.{layer}.mlp"] = self.params[f"blocks.{layer}.mlp.fc1.weight"].shape[1]
        return widths

    def is_full(self):
        from bimask_search.search.cost_model import full_widths
        return self.widths() == full_widths(self.config)

    def parameters(self, include_decoder=True):
        return [p for name, p in self.params.items() if include_decoder or not name.startswith("decoder.")]

    def decoder_parameters(self):
        return [p for name, p in self.params.items() if name.startswith("decoder.")]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        for name, value in state.items():
            if name not in self.params or self.params[name].shape != np.shape(value):
                raise SiteAlignmentError(name, f"checkpoint tensor {np.shape(value)} does not fit the model")
            self.params[name].data = np.array(value, dtype=np.float64)

    def _check_alignment(self, bimasks):
        widths = self.widths()
        for site, width in widths.items():
            if site not in bimasks.masks:
                raise SiteAlignmentError(site, "no mask supplied")
            if bimasks.masks[site].shape != (width,):
                raise SiteAlignmentError(site, f"mask of shape {bimasks.masks[site].shape} for {width} units")
        extra = set(bimasks.masks) - set(widths)
        if extra:
            site = sorted(extra)[0]
            raise SiteAlignmentError(site, "model has no such prunable site")

    def forward(self, patches, bimasks=None, mask_positions=None):
        """
        Classify a batch and reconstruct its masked patches

        Args:
            patches: Array [B, N, P] from patchify
            bimasks: Optional BiMaskSnapshot aligned with widths()
            mask_positions: Optional boolean map [N]; True patches are replaced
                by the mask token and reconstructed

        Returns:
            MaskedForwardOutput
        """
        p = self.params
        patches = np.asarray(patches, dtype=np.float64)
        batch, tokens, _ = patches.shape
        masks = None
        indicator = None
        if bimasks is not None:
            self._check_alignment(bimasks)
            masks = bimasks.masks
            indicator = bimasks.channel_indicator

        x = Tensor(patches) @ p["patch_embed.weight"] + p["patch_embed.bias"]
        masked = mask_positions is not None and np.any(mask_positions)
        if masked:
            x = F.where(np.asarray(mask_positions, dtype=bool)[None, :, None], p["mask_token"], x)
        x = x + p["pos_embed"]
        m_pe = masks["patch_embed"] if masks else None
        if m_pe is not None:
            x = x * m_pe

        for layer, info in enumerate(self.layers):
            prefix = f"blocks.{layer}"
            heads, head_dim = info["heads"], info["head_dim"]

            a = F.layer_norm(x, indicator)

            def split(t):
                return t.reshape(batch, tokens, heads, head_dim).transpose(0, 2, 1, 3)

            q = split(a @ p[f"{prefix}.attn.q.weight"] + p[f"{prefix}.attn.q.bias"])
            k = split(a @ p[f"{prefix}.attn.k.weight"] + p[f"{prefix}.attn.k.bias"])
            v = split(a @ p[f"{prefix}.attn.v.weight"] + p[f"{prefix}.attn.v.bias"])
            if masks:
                m_qkv = masks[f"{prefix}.qkv"]
                q, k, v = q * m_qkv, k * m_qkv, v * m_qkv
            attn = F.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
            o = attn @ v
            if masks:
                o = o * masks[f"{prefix}.heads"].reshape(heads, 1, 1)
            o = o.transpose(0, 2, 1, 3).reshape(batch, tokens, heads * head_dim)
            o = o @ p[f"{prefix}.attn.proj.weight"] + p[f"{prefix}.attn.proj.bias"]
            if m_pe is not None:
                o = o * m_pe
            x = x + o

            a = F.layer_norm(x, indicator)
            z = F.gelu(a @ p[f"{prefix}.mlp.fc1.weight"] + p[f"{prefix}.mlp.fc1.bias"])
            if masks:
                z = z * masks[f"{prefix}.mlp"]
            z = z @ p[f"{prefix}.mlp.fc2.weight"] + p[f"{prefix}.mlp.fc2.bias"]
            if m_pe is not None:
                z = z * m_pe
            x = x + z

        feats = F.layer_norm(x, indicator)
        logits = feats.mean(axis=1) @ p["head.weight"] + p["head.bias"]

        reconstruction = None
        if masked:
            index = np.flatnonzero(mask_positions)
            selected = F.take(feats, index, axis=1)
            reconstruction = (selected @ p["decoder.weight"] + p["decoder.bias"]).reshape(batch, -1)
        return MaskedForwardOutput(logits, reconstruction, None if mask_positions is None else np.asarray(mask_positions, dtype=bool))

    __call__ = forward


def reconstruct_loss(output, patches):
    """Mean absolute pixel error over the masked patches; 0 when nothing is masked"""
    if output.reconstruction is None:
        return Tensor(0.0)
    index = np.flatnonzero(output.mask_positions)
    target = np.asarray(patches, dtype=np.float64)[:, index, :].reshape(output.reconstruction.shape)
    return F.l1_loss(output.reconstruction, target)


def _kept_units(export):
    return {entry["site"]: np.asarray(sorted(entry["kept_units"]), dtype=np.int64) for entry in export["submodules"]}


def materialize_architecture(export, model):
    """
    Slice the full supernet down to the kept units of an architecture document

    Args:
        export: Architecture document (site -> kept_units)
        model: Full-width ToyViT

    Returns:
        ToyViT: Dense pruned model sharing no arrays with the supernet
    """
    if not model.is_full():
        raise MaterializationError("materialization starts from the full-width supernet")
    config = model.config
    kept = _kept_units(export)
    for site, width in model.widths().items():
        if site not in kept:
            raise SiteAlignmentError(site, "missing from the architecture document")
        units = kept[site]
        if units.size == 0 or units.min() < 0 or units.max() >= width:
            raise SiteAlignmentError(site, f"kept units {units.tolist()} outside 0..{width - 1}")

    w = model.state_dict()
    ch = kept["patch_embed"]
    params = {
        "patch_embed.weight": w["patch_embed.weight"][:, ch],
        "patch_embed.bias": w["patch_embed.bias"][ch],
        "pos_embed": w["pos_embed"][:, ch],
        "mask_token": w["mask_token"][ch],
    }
    layers = []
    for layer in range(config.depth):
        prefix = f"blocks.{layer}"
        slots, heads, hidden = kept[f"{prefix}.qkv"], kept[f"{prefix}.heads"], kept[f"{prefix}.mlp"]
        cols = np.array([h * config.head_dim + s for h in heads for s in slots], dtype=np.int64)
        for name in ("q", "k", "v"):
            params[f"{prefix}.attn.{name}.weight"] = w[f"{prefix}.attn.{name}.weight"][np.ix_(ch, cols)]
            params[f"{prefix}.attn.{name}.bias"] = w[f"{prefix}.attn.{name}.bias"][cols]
        params[f"{prefix}.attn.proj.weight"] = w[f"{prefix}.attn.proj.weight"][np.ix_(cols, ch)]
        params[f"{prefix}.attn.proj.bias"] = w[f"{prefix}.attn.proj.bias"][ch]
        params[f"{prefix}.mlp.fc1.weight"] = w[f"{prefix}.mlp.fc1.weight"][np.ix_(ch, hidden)]
        params[f"{prefix}.mlp.fc1.bias"] = w[f"{prefix}.mlp.fc1.bias"][hidden]
        params[f"{prefix}.mlp.fc2.weight"] = w[f"{prefix}.mlp.fc2.weight"][np.ix_(hidden, ch)]
        params[f"{prefix}.mlp.fc2.bias"] = w[f"{prefix}.mlp.fc2.bias"][ch]
        layers.append({"heads": int(heads.size), "head_dim": int(slots.size)})
    params["head.weight"] = w["head.weight"][ch, :]
    params["head.bias"] = w["head.bias"]
    params["decoder.weight"] = w["decoder.weight"][ch, :]
    params["decoder.bias"] = w["decoder.bias"]

    pruned = ToyViT(config, params=params, layers=layers)
    logger.info(f"Materialized model with widths {pruned.widths()}")
    return pruned


def materialize_widths(widths, model):
    """Materialize the first widths[site] units of every site"""
    export = {"submodules": [{"site": site, "kept_units": list(range(int(width)))} for site, width in widths.items()]}
    return materialize_architecture(export, model)


def materialize(space, model):
    """
    Dense pruned model of a finished search

    Raises:
        MaterializationError: The search has not finished
    """
    from bimask_search.search.bimask import hardened_architecture

    if not space.finished:
        raise MaterializationError("search has not finished; no architecture to materialize")
    return materialize_architecture(hardened_architecture(space), model)


def count_parameters(model, include_decoder=False):
    """Parameters of a model excluding the mask token (and the decoder unless asked)"""
    total = 0
    for name, p in model.params.items():
        if name == "mask_token" or (name.startswith("decoder.") and not include_decoder):
            continue
        total += p.size
    return int(total)
