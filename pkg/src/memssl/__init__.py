"""memssl: memory-augmented teacher-student self-supervised pretraining at desk
scale, plus the downstream adaptation, evaluation, and statistics toolkit.

Subpackages/modules:
    backend    hot kernels (compiled extension with numpy fallback)
    autodiff   reverse-mode engine over dense arrays
    optim      AdamW
    vit        small vision transformer encoder + projection head
    data       manifests, multi-crop augmentation, balanced sampling, synthesis
    memory     FIFO embedding memory with block retrieval
    schedules  cosine/linear schedule evaluators
    trainer    self-supervised pretraining loop
    adapt      downstream fine-tuning and data-fraction ablation
    metrics    AUROC, sensitivity/specificity, bootstrap CIs, paired stats
    checkpoint binary checkpoint container
    config     run configuration, presets, run manifests
    cli        command-line entry points
"""

__version__ = "0.1.0"
