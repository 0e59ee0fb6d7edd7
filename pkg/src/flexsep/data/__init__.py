"""Synthetic audio-visual corpus: generation, mixing, file formats."""
from .dataset import (
    MIX_KINDS, SPLITS, Manifest, ManifestError, MixtureSample, SampleSet, build_dataset,
    make_sample, speaker_pools,
)
from .io import FormatError, Waveform, read_visual, read_wav, write_visual, write_wav
from .synth import (
    F0_BANDS, DegenerateSourceError, MixResult, SpeakerProfile, gen_speaker, mix, speaker_profile,
)

__all__ = [
    "MIX_KINDS", "SPLITS", "Manifest", "ManifestError", "MixtureSample", "SampleSet",
    "build_dataset", "make_sample", "speaker_pools", "FormatError", "Waveform", "read_visual",
    "read_wav", "write_visual", "write_wav", "F0_BANDS", "DegenerateSourceError", "MixResult",
    "SpeakerProfile", "gen_speaker", "mix", "speaker_profile",
]
