"""Tiny model and dataset factories shared by the training-level tests."""
from impmoe.embedder import EmbedConfig, PatchKernel
from impmoe.model import ModelConfig, init_model
from impmoe.moe import EncoderConfig
from impmoe.scheduler import LRSchedule, Trainer, TrainState, build_task_registry
from impmoe.synth import DatasetSpec, SynthConfig

TINY_SYNTH = SynthConfig(num_classes=4, image_size=32, video_frames=16, spec_size=16,
                         wave_len=256, noise=0.1)


def tiny_model(router="expert_choice", towers="single", qk_layernorm=True) -> ModelConfig:
    embed = EmbedConfig(dim=16, kernel=PatchKernel(4, 16, 16), spec_kernel=16, wave_kernel=256,
                        wave_max_tokens=4, text_max_len=8, temporal_buckets=4, spatial_buckets=4,
                        spec_buckets=(2, 2))
    enc = EncoderConfig(num_layers=2, dim=16, ffn_dim=32, heads=2, num_experts=2,
                        router_kind=router, qk_layernorm=qk_layernorm)
    return ModelConfig(embed, enc, towers)


def image_text(name="it", train=64, objectives=("NCE_pair(image,text)", "SCE")) -> DatasetSpec:
    return DatasetSpec(name, ("image", "text"), train, 16, objectives, TINY_SYNTH)


def tiny_trainer(datasets, steps=20, batch=8, mode="alternating", seed=0, multi_resolution=True,
                 model=None, peak=1e-3) -> Trainer:
    model = model or tiny_model()
    params = init_model(model, datasets, seed)
    reg = build_task_registry(datasets, model.embed.kernel, batch, multi_resolution)
    return Trainer(model, datasets, reg, TrainState.fresh(params, seed), LRSchedule(peak, steps),
                   mode=mode)
