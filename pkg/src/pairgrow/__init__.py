"""pairgrow: contrastive image-text pretraining that grows its architecture
as the training corpus grows.

Core pieces: a numpy-backed reverse-mode autodiff engine (`tensor`), a
dual-stream encoder pair with an optional shared trunk (`model`), the
symmetric contrastive objective and zero-shot/retrieval metrics
(`objective`), architecture growth machinery (`growth`), a deterministic
synthetic shapes corpus (`data`), optimizers (`optim`) and the multi-step
run driver plus CLI (`pipeline`, `cli`).
"""

__version__ = "0.1.0"
