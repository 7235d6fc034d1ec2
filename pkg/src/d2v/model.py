"""Frontend + encoder + head assembled into student and teacher passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .distill import teacher_view
from .errors import ConfigError
from .frontends import AudioSpec, ImageSpec, TextSpec, embed, init_frontend
from .numerics import Streams, Tensor
from .transformer import ActivationTaps, EncoderConfig, encode, init_encoder, positions, substitute_mask_token, trunc_normal

MODALITIES = {"vision": ImageSpec, "speech": AudioSpec, "text": TextSpec}


@dataclass(frozen=True)
class ModelSpec:
    encoder: EncoderConfig
    frontend: ImageSpec | AudioSpec | TextSpec

    @property
    def modality(self) -> str:
        for name, cls in MODALITIES.items():
            if isinstance(self.frontend, cls):
                return name
        raise ConfigError(f"unknown frontend {type(self.frontend).__name__}")

    def seq_len(self, sample_shape) -> int:
        return self.frontend.seq_len(sample_shape)


def init_params(spec: ModelSpec, streams: Streams, dtype=nx.STANDARD) -> dict[str, Tensor]:
    H = spec.encoder.hidden
    params = init_frontend(spec.frontend, H, streams.generator("init", "frontend"), dtype)
    params.update(init_encoder(spec.encoder, streams.generator("init", "encoder"), dtype))
    rng = streams.generator("init", "head")
    params["head.w"] = Tensor(trunc_normal(rng, (H, H)), requires_grad=True, dtype=dtype)
    params["head.b"] = Tensor(np.zeros(H), requires_grad=True, dtype=dtype)
    return params


def student_forward(params: dict, spec: ModelSpec, batch, plans, rng=None) -> tuple[Tensor, Tensor]:
    """Embed the masked view and encode it; returns ``(embedded_clean, final)``.

    For text, RANDOM_TOKEN replacements happen on the ids before embedding, so the
    clean embedding returned here is only reused by the teacher for other modalities.
    """
    if isinstance(spec.frontend, TextSpec):
        corrupted = np.stack([p.apply_to_ids(ids) for p, ids in zip(plans, np.asarray(batch))])
        emb = embed(params, corrupted, spec.frontend)
    else:
        emb = embed(params, batch, spec.frontend)
    x = substitute_mask_token(emb, plans, params["mask_embed"])
    final, _ = encode(params, x, positions(params, x.shape[1]), spec.encoder, want_taps=False, rng=rng)
    return emb, final


def teacher_taps(teacher: dict, student: dict, spec: ModelSpec, batch, dtype,
                 embedded: Tensor | None = None) -> ActivationTaps:
    """Teacher pass over the unmasked input; no graph is recorded.

    ``embedded`` may carry the (shared) frontend output already computed for the student.
    """
    view = teacher_view(teacher, student, dtype)
    with nx.no_grad():
        emb = embed(view, batch, spec.frontend) if embedded is None else embedded.detach()
        _, taps = encode(view, emb, positions(view, emb.shape[1]), spec.encoder, want_taps=True)
    return taps


def pooled(params: dict, spec: ModelSpec, batch) -> np.ndarray:
    """Mean over time of the last block output, ``[B, H]``."""
    with nx.no_grad():
        emb = embed(params, batch, spec.frontend)
        final, _ = encode(params, emb, positions(params, emb.shape[1]), spec.encoder, want_taps=False)
    return final.data.mean(axis=-2)

