"""Hook Points.

Named identity modules wrapped around the model's intermediate activations, so they can be read
(for the attention dump and the frozen attention masks of the gradient check) or edited while the
model runs.

Hooks are forward only. Gradients come from :func:`superpoint_lens.kernels.backward`, which never
goes through module hooks.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from torch.utils.hooks import RemovableHandle

HookFunction = Callable[..., Optional[torch.Tensor]]
"""Called as ``hook(activation, hook=hook_point)``; a non-None return replaces the activation."""

NameOrFilter = Union[str, Callable[[str], bool]]
HookList = Sequence[Tuple[NameOrFilter, HookFunction]]
NamesFilter = Optional[Union[Callable[[str], bool], Sequence[str], str]]


@dataclass
class HookHandle:
    """A registered hook and the bookkeeping needed to remove it again."""

    hook: RemovableHandle
    is_permanent: bool = False
    context_level: Optional[int] = None
    """Depth of the ``hooks()`` context that added the hook; None for hooks added by hand."""


class HookPoint(nn.Module):
    """Identity module marking an activation that hooks can be attached to by name."""

    def __init__(self):
        super().__init__()
        self.handles: List[HookHandle] = []
        # Set by HookedRootModule.setup, relative to the root module.
        self.name: Optional[str] = None

    def add_perma_hook(self, hook: HookFunction) -> None:
        self.add_hook(hook, is_permanent=True)

    def add_hook(
        self,
        hook: HookFunction,
        is_permanent: bool = False,
        level: Optional[int] = None,
        prepend: bool = False,
    ) -> None:
        """Attach ``hook``. With ``prepend`` it runs before the hooks already attached."""

        def forward_hook(module: nn.Module, module_input: Any, module_output: torch.Tensor):
            return hook(module_output, hook=self)

        forward_hook.__name__ = repr(hook)
        handle = HookHandle(self.register_forward_hook(forward_hook), is_permanent, level)
        if prepend:
            # register_forward_hook only takes prepend from torch 2.0 on
            self._forward_hooks.move_to_end(handle.hook.id, last=False)
            self.handles.insert(0, handle)
        else:
            self.handles.append(handle)

    def remove_hooks(self, including_permanent: bool = False, level: Optional[int] = None) -> None:
        """Remove temporary hooks, only those of context ``level`` when it is given."""
        kept = []
        for handle in self.handles:
            removable = including_permanent or (
                not handle.is_permanent and (level is None or handle.context_level == level)
            )
            if removable:
                handle.hook.remove()
            else:
                kept.append(handle)
        self.handles = kept

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def _as_names_filter(names_filter: NamesFilter) -> Callable[[str], bool]:
    if names_filter is None:
        return lambda name: True
    if isinstance(names_filter, str):
        return lambda name: name == names_filter
    if isinstance(names_filter, (list, tuple)):
        names = set(names_filter)
        return lambda name: name in names
    if callable(names_filter):
        return names_filter
    raise ValueError("names_filter must be a string, list of strings, or function")


class HookedRootModule(nn.Module):
    """A module whose :class:`HookPoint` descendants can be addressed by name.

    Subclasses build their layers and then call :meth:`setup`. ``run_with_hooks`` runs the model
    with temporary hooks and ``run_with_cache`` also returns every selected activation. A hook
    point reached several times in one forward pass, like those of the prediction head shared by
    every decoder layer, keeps its last activation in the cache.
    """

    hook_dict: Dict[str, HookPoint]

    def __init__(self):
        super().__init__()
        self.context_level = 0

    def setup(self):
        """Name every submodule and collect the hook points. Call at the end of ``__init__``."""
        self.hook_dict = {}
        for name, module in self.named_modules():
            if name == "":
                continue
            module.name = name
            if isinstance(module, HookPoint):
                self.hook_dict[name] = module

    def hook_points(self):
        return self.hook_dict.values()

    def reset_hooks(self, including_permanent: bool = False, level: Optional[int] = None):
        for hook_point in self.hook_points():
            hook_point.remove_hooks(including_permanent=including_permanent, level=level)

    def add_hook(
        self,
        name: NameOrFilter,
        hook: HookFunction,
        is_permanent: bool = False,
        level: Optional[int] = None,
        prepend: bool = False,
    ) -> None:
        """Attach ``hook`` to the named hook point, or to every hook point ``name`` accepts."""
        if isinstance(name, str):
            if name not in self.hook_dict:
                raise KeyError(f"{name} is not a hook point")
            targets = [self.hook_dict[name]]
        else:
            targets = [hp for hook_name, hp in self.hook_dict.items() if name(hook_name)]
        for hook_point in targets:
            hook_point.add_hook(hook, is_permanent=is_permanent, level=level, prepend=prepend)

    @contextmanager
    def hooks(
        self, fwd_hooks: HookList = (), reset_hooks_end: bool = True
    ) -> Iterator["HookedRootModule"]:
        """
        A context manager for adding temporary hooks to the model.

        Args:
            fwd_hooks: List of ``(name, hook)`` pairs, where name is either the name of a hook point
                or a Boolean function on hook names.
            reset_hooks_end (bool): If True, removes the hooks added by this context when it exits.

        Example:

        .. code-block:: python

            def open_mask(attention_mask, hook):
                return torch.zeros_like(attention_mask)

            with model.hooks(fwd_hooks=[("blocks.0.hook_attn_mask", open_mask)]):
                predictions = model(scene)
        """
        self.context_level += 1
        try:
            for name, hook in fwd_hooks:
                self.add_hook(name, hook, level=self.context_level)
            yield self
        finally:
            if reset_hooks_end:
                self.reset_hooks(level=self.context_level)
            self.context_level -= 1

    def run_with_hooks(
        self,
        *model_args: Any,
        fwd_hooks: HookList = (),
        reset_hooks_end: bool = True,
        **model_kwargs: Any,
    ):
        """Runs the model with the given hooks attached."""
        with self.hooks(fwd_hooks, reset_hooks_end) as hooked_model:
            return hooked_model(*model_args, **model_kwargs)

    def get_caching_hooks(
        self, names_filter: NamesFilter = None
    ) -> Tuple[Dict[str, torch.Tensor], List[Tuple[str, HookFunction]]]:
        """An empty cache and the hooks that fill it with detached activations."""
        accept = _as_names_filter(names_filter)
        cache: Dict[str, torch.Tensor] = {}

        def save_hook(tensor: torch.Tensor, hook: HookPoint):
            assert hook.name is not None, "Hook points are named by setup()"
            cache[hook.name] = tensor.detach()

        return cache, [(name, save_hook) for name in self.hook_dict if accept(name)]

    def run_with_cache(
        self, *model_args: Any, names_filter: NamesFilter = None, **model_kwargs: Any
    ) -> Tuple[Any, Dict[str, torch.Tensor]]:
        """
        Runs the model and returns its output together with a dictionary from hook name to the
        activation seen there.

        Args:
            names_filter (NamesFilter, optional): Which activations to cache. Accepts None (cache
                everything), a hook name, a list of hook names, or a function on hook names.
        """
        cache, caching_hooks = self.get_caching_hooks(names_filter)
        with self.hooks(fwd_hooks=caching_hooks):
            model_out = self(*model_args, **model_kwargs)
        return model_out, cache
