"""Application layer: configs, datasets, checkpoints, export, CLI.

Import from the submodules directly (``bitbranch.appcli.config``,
``.datasets``, ``.checkpoint``, ``.export``, ``.cli``); this package
module stays empty so ``python3 -m bitbranch.appcli.datasets`` and
friends run without double-import warnings.
"""
