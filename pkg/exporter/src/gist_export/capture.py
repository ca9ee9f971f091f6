"""Pull one feature tensor per input out of a torch module.

Three selector spellings are understood:

* a module name, exactly as listed by ``named_modules()`` - that module's
  output is captured;
* ``"penultimate-pool"`` - the pooling layer that fires last during a
  forward pass, its output flattened per input;
* ``"cls-token"`` - the last module that emits a (batch, sequence, hidden)
  tensor, keeping one sequence position.  The position defaults to 0 and is
  an explicit override because some architectures put the summary token at
  the end instead.

The convention selectors resolve themselves on the first batch by probing a
real forward pass, which follows execution order rather than registration
order.
"""
from __future__ import annotations

import torch
from torch import nn

from .errors import DataFormatError, LayerNotFound, SelectorAmbiguous

CONVENTIONS = ("penultimate-pool", "cls-token")

_POOL_LAYERS = (
    nn.AvgPool1d, nn.AvgPool2d, nn.AvgPool3d,
    nn.MaxPool1d, nn.MaxPool2d, nn.MaxPool3d,
    nn.AdaptiveAvgPool1d, nn.AdaptiveAvgPool2d, nn.AdaptiveAvgPool3d,
    nn.AdaptiveMaxPool1d, nn.AdaptiveMaxPool2d, nn.AdaptiveMaxPool3d,
    nn.FractionalMaxPool2d, nn.FractionalMaxPool3d,
    nn.LPPool1d, nn.LPPool2d,
)


def _first_tensor(value):
    """A tensor, or the leading tensor of a tuple/list, else None."""
    if torch.is_tensor(value):
        return value
    if isinstance(value, (tuple, list)) and value and torch.is_tensor(value[0]):
        return value[0]
    return None


class FeatureTap:
    """Capture (features, logits) pairs from a model, batch by batch."""

    def __init__(self, model: nn.Module, selector: str, cls_position: int = 0):
        self.model = model
        self.selector = selector
        self.cls_position = cls_position
        self._module: nn.Module | None = None
        self._grabbed: list = []
        if selector not in CONVENTIONS:
            named = dict(model.named_modules())
            # "" names the root module; treat it as a typo, not a request
            if not selector or selector not in named:
                known = sorted(n for n in named if n)
                hint = ", ".join(known[:8]) + ("..." if len(known) > 8 else "")
                raise LayerNotFound(
                    f"model has no module named {selector!r} (it has: {hint})"
                )
            self._attach(named[selector])

    def _attach(self, module: nn.Module) -> None:
        self._module = module
        module.register_forward_hook(lambda mod, args, out: self._grabbed.append(out))

    def run(self, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One forward pass; returns 2-D (features, logits) for the batch."""
        self._grabbed.clear()
        with torch.no_grad():
            if self._module is None:
                out = self._resolve_and_run(batch)
            else:
                out = self.model(batch)
        if len(self._grabbed) != 1:
            raise SelectorAmbiguous(
                f"selector {self.selector!r} produced {len(self._grabbed)} tensors "
                "in one forward pass, needs exactly 1 per input batch"
            )
        feats = self._shape_features(self._grabbed.pop(), batch.shape[0])
        logits = self._shape_logits(out, batch.shape[0])
        return feats, logits

    def _resolve_and_run(self, batch: torch.Tensor):
        """Probe pass for the convention selectors: hook everything, then keep
        the last module whose output matches the convention."""
        if self.selector == "penultimate-pool":
            def matches(mod, out):
                return isinstance(mod, _POOL_LAYERS) and torch.is_tensor(out)
            missing = "no pooling layer fired during the forward pass"
        else:
            def matches(mod, out):
                t = _first_tensor(out)
                return t is not None and t.ndim == 3
            missing = "no module produced a (batch, sequence, hidden) output"

        # keep only the last matching output plus per-module firing counts,
        # so probing a deep model does not pin every intermediate in memory
        state: dict = {"module": None, "output": None, "counts": {}}

        def grab(mod, args, out):
            if matches(mod, out):
                state["module"] = mod
                state["output"] = out
                state["counts"][id(mod)] = state["counts"].get(id(mod), 0) + 1

        handles = [m.register_forward_hook(grab) for m in self.model.modules()]
        try:
            out = self.model(batch)
        finally:
            for h in handles:
                h.remove()
        chosen = state["module"]
        if chosen is None:
            raise LayerNotFound(f"selector {self.selector!r}: {missing}")
        fired = state["counts"][id(chosen)]
        if fired != 1:
            raise SelectorAmbiguous(
                f"selector {self.selector!r} settled on a module that fired "
                f"{fired} times in one forward pass"
            )
        self._attach(chosen)
        self._grabbed.append(state["output"])
        return out

    def _shape_features(self, raw, batch_rows: int) -> torch.Tensor:
        t = _first_tensor(raw)
        if t is None:
            raise SelectorAmbiguous(
                f"selector {self.selector!r} captured a {type(raw).__name__}, "
                "not a tensor"
            )
        t = t.detach()
        if self.selector == "cls-token":
            if t.ndim != 3:
                raise SelectorAmbiguous(
                    f"cls-token needs (batch, sequence, hidden) activations, "
                    f"got shape {tuple(t.shape)}"
                )
            seq = t.shape[1]
            if not -seq <= self.cls_position < seq:
                raise SelectorAmbiguous(
                    f"cls position {self.cls_position} is outside the "
                    f"sequence length {seq}"
                )
            t = t[:, self.cls_position, :]
        if t.ndim == 0 or t.shape[0] != batch_rows:
            raise SelectorAmbiguous(
                f"selector {self.selector!r} produced features with leading "
                f"dimension {tuple(t.shape)[:1]} for a batch of {batch_rows}"
            )
        return t.reshape(t.shape[0], -1)

    @staticmethod
    def _shape_logits(raw, batch_rows: int) -> torch.Tensor:
        t = _first_tensor(raw)
        if t is None and hasattr(raw, "logits") and torch.is_tensor(raw.logits):
            t = raw.logits
        if t is None:
            raise DataFormatError(
                f"model output is a {type(raw).__name__}, not a logit tensor"
            )
        t = t.detach()
        if t.ndim == 0 or t.shape[0] != batch_rows:
            raise DataFormatError(
                f"model output has shape {tuple(t.shape)} for a batch of {batch_rows}"
            )
        return t.reshape(t.shape[0], -1)
