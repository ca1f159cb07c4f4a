"""Exceptions and payload validators for data and model contracts."""
from typing import Callable, Dict

from .base import Modality, Payload


class VerificationError(Exception):
    """Raised when a data or model contract is violated."""
    pass


class ManifestError(VerificationError):
    pass


class MissingMediaError(ManifestError):
    pass


class MosRangeError(ManifestError):
    pass


class DuplicateSampleError(ManifestError):
    pass


class SplitError(VerificationError):
    pass


class FeatureCompositionError(VerificationError):
    pass


class HeadMismatchError(VerificationError):
    pass


class UnknownDatabaseError(VerificationError):
    pass


class OverlapError(VerificationError):
    pass


class ConfigHashError(VerificationError):
    pass


class DegenerateBatchError(VerificationError):
    """SRCC is undefined for a batch with constant targets."""
    pass


def _verify_frames(payload: Payload, sample_id: str) -> None:
    if payload.frames is None or payload.frames.ndim != 4 or payload.frames.shape[0] < 1:
        raise VerificationError(f"{sample_id}: expected a (T, C, H, W) frame array with T >= 1")


def _verify_frame_rate(payload: Payload, sample_id: str) -> None:
    if payload.frame_rate is None or payload.frame_rate <= 0:
        raise VerificationError(f"{sample_id}: frame rate must be positive")


def _verify_waveform(payload: Payload, sample_id: str) -> None:
    if payload.waveform is None or payload.waveform.ndim != 1 or payload.waveform.size == 0:
        raise VerificationError(f"{sample_id}: expected a non-empty mono waveform")
    if payload.sample_rate is None or payload.sample_rate <= 0:
        raise VerificationError(f"{sample_id}: sample rate must be positive")


def verify_image_payload(payload: Payload, sample_id: str) -> None:
    _verify_frames(payload, sample_id)


def verify_video_payload(payload: Payload, sample_id: str) -> None:
    _verify_frames(payload, sample_id)
    _verify_frame_rate(payload, sample_id)


def verify_audio_payload(payload: Payload, sample_id: str) -> None:
    _verify_waveform(payload, sample_id)


def verify_av_payload(payload: Payload, sample_id: str) -> None:
    verify_video_payload(payload, sample_id)
    _verify_waveform(payload, sample_id)


def get_payload_validator(modality: Modality) -> Callable[[Payload, str], None]:
    """Get the payload validator for a modality."""
    validators: Dict[Modality, Callable[[Payload, str], None]] = {
        Modality.IMAGE: verify_image_payload,
        Modality.VIDEO: verify_video_payload,
        Modality.AUDIO: verify_audio_payload,
        Modality.AV: verify_av_payload,
    }
    return validators[Modality(modality)]
