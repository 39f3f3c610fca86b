"""Sample-bank persistence, checkpoints, split protocols, synthetic data.

A bank is a directory: ``manifest.json`` (dataset metadata, counts and the
sample index table), ``features.bin`` (magic ``CLDTAFB1`` followed by
N x channels x bands float32 little-endian, row-major in index order),
``montage.csv`` and optionally ``raw/t<id>.bin`` files (magic ``CLDTARW1``,
float64 sampling rate, then channels x samples float32).  Payloads are raw
little-endian floats so round-trips are bit-exact.

Banks are immutable after load: concurrent readers are safe, one writer per
directory.  Converters for licensed recordings are out of scope; this format
is the integration point (see README).
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .config import ModelConfig, SynthSpec, _from_dict
from .dsp import DEFAULT_BANDS, FeatureSample, RawTrial
from .model import DtaParameters, init_parameters
from .montage import ChannelMontage, default_montage, load_montage, save_montage

FORMAT_VERSION = 1
MAGIC_FEATURES = b"CLDTAFB1"
MAGIC_RAW = b"CLDTARW1"
MAGIC_CHECKPOINT = b"CLDTACK1"

MANIFEST_NAME = "manifest.json"
FEATURES_NAME = "features.bin"
MONTAGE_NAME = "montage.csv"

SYNTH_FS = 200.0
SYNTH_WINDOW_S = 1.0


class BankError(ValueError):
    pass


class BadMagicError(BankError):
    pass


class TruncatedPayloadError(BankError):
    pass


class ManifestMismatchError(BankError):
    pass


class CheckpointError(ValueError):
    pass


class SplitError(ValueError):
    pass


# -- sample bank ---------------------------------------------------------------

@dataclass
class SampleBank:
    """Feature samples plus optional raw trials, tied to a montage."""

    dataset: str
    classes: tuple
    bands: tuple
    montage: ChannelMontage
    samples: list = field(default_factory=list)
    raw_trials: list = field(default_factory=list)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.bands = tuple(self.bands)
        n_ch = len(self.montage)
        for s in self.samples:
            if s.label < 0 or s.label >= len(self.classes):
                raise BankError(f"sample label {s.label} outside {len(self.classes)} classes")
            if s.de.shape != (n_ch, len(self.bands)):
                raise BankError(
                    f"sample de shape {s.de.shape} != ({n_ch}, {len(self.bands)})")
        for t in self.raw_trials:
            if t.label < 0 or t.label >= len(self.classes):
                raise BankError(f"trial label {t.label} outside {len(self.classes)} classes")
            if t.n_channels != n_ch:
                raise BankError(f"trial has {t.n_channels} channels, montage {n_ch}")

    def __len__(self):
        return len(self.samples)

    def subjects(self):
        seen = dict.fromkeys(s.subject_id for s in self.samples)
        seen.update(dict.fromkeys(t.subject_id for t in self.raw_trials))
        return sorted(seen)

    def filter(self, keep) -> "SampleBank":
        """View with the samples satisfying keep(sample); shares sample objects."""
        return SampleBank(self.dataset, self.classes, self.bands, self.montage,
                          [s for s in self.samples if keep(s)], self.raw_trials)

    def feature_array(self):
        """(N, channels, bands) float64 stack plus (N,) labels."""
        feats = np.stack([s.de for s in self.samples]).astype(np.float64)
        labels = np.array([s.label for s in self.samples], dtype=np.int64)
        return feats, labels


def bank_equal(a: SampleBank, b: SampleBank) -> bool:
    """Field-for-field, bit-for-bit equality (used by round-trip tests)."""
    meta = (a.dataset == b.dataset and a.classes == b.classes and a.bands == b.bands
            and a.montage.names == b.montage.names
            and np.array_equal(a.montage.positions, b.montage.positions)
            and len(a.samples) == len(b.samples)
            and len(a.raw_trials) == len(b.raw_trials))
    if not meta:
        return False
    for sa, sb in zip(a.samples, b.samples):
        if ((sa.subject_id, sa.session_id, sa.trial_id, sa.window_index, sa.label)
                != (sb.subject_id, sb.session_id, sb.trial_id, sb.window_index, sb.label)):
            return False
        if sa.de.dtype != sb.de.dtype or not np.array_equal(sa.de, sb.de):
            return False
    for ta, tb in zip(a.raw_trials, b.raw_trials):
        if ((ta.subject_id, ta.session_id, ta.trial_id, ta.label, ta.fs)
                != (tb.subject_id, tb.session_id, tb.trial_id, tb.label, tb.fs)):
            return False
        if not np.array_equal(ta.data.astype(np.float32), tb.data.astype(np.float32)):
            return False
    return True


def write_bank(bank: SampleBank, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_montage(bank.montage, directory / MONTAGE_NAME)

    payload = bytearray(MAGIC_FEATURES)
    index = []
    for s in bank.samples:
        index.append([s.subject_id, s.session_id, s.trial_id, s.window_index, s.label])
        payload += np.ascontiguousarray(s.de, dtype="<f4").tobytes()
    (directory / FEATURES_NAME).write_bytes(bytes(payload))

    raw_records = []
    if bank.raw_trials:
        raw_dir = directory / "raw"
        raw_dir.mkdir(exist_ok=True)
        for i, t in enumerate(bank.raw_trials):
            fname = f"raw/t{i}.bin"
            blob = bytearray(MAGIC_RAW)
            blob += struct.pack("<d", t.fs)
            blob += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            (directory / fname).write_bytes(bytes(blob))
            raw_records.append({
                "subject": t.subject_id, "session": t.session_id,
                "trial": t.trial_id, "label": t.label, "fs": t.fs,
                "channels": t.n_channels, "samples": t.n_samples, "file": fname,
            })

    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset": bank.dataset,
        "classes": list(bank.classes),
        "bands": list(bank.bands),
        "montage_file": MONTAGE_NAME,
        "counts": {
            "n_samples": len(bank.samples),
            "n_channels": len(bank.montage),
            "n_bands": len(bank.bands),
            "n_raw_trials": len(bank.raw_trials),
        },
        "samples": index,
        "raw_trials": raw_records,
    }
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1), encoding="utf-8")


def _manifest_get(manifest, key, where):
    if key not in manifest:
        raise ManifestMismatchError(f"{where}: manifest is missing key {key!r}")
    return manifest[key]


def read_bank(directory) -> SampleBank:
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.exists():
        raise BankError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    version = _manifest_get(manifest, "format_version", str(mpath))
    if version != FORMAT_VERSION:
        raise ManifestMismatchError(f"unsupported format_version {version}")
    counts = _manifest_get(manifest, "counts", str(mpath))
    n_samples = counts["n_samples"]
    n_ch = counts["n_channels"]
    n_bands = counts["n_bands"]
    index = _manifest_get(manifest, "samples", str(mpath))
    if len(index) != n_samples:
        raise ManifestMismatchError(
            f"counts.n_samples={n_samples} but index table has {len(index)} rows")

    montage = load_montage(directory / _manifest_get(manifest, "montage_file", str(mpath)))
    if len(montage) != n_ch:
        raise ManifestMismatchError(
            f"montage has {len(montage)} channels, manifest says {n_ch}")

    blob = (directory / FEATURES_NAME).read_bytes()
    if blob[:len(MAGIC_FEATURES)] != MAGIC_FEATURES:
        raise BadMagicError(f"{FEATURES_NAME}: bad magic {blob[:8]!r}")
    body = blob[len(MAGIC_FEATURES):]
    record = n_ch * n_bands * 4
    if record > 0 and len(body) % record != 0:
        raise TruncatedPayloadError(
            f"{FEATURES_NAME}: payload of {len(body)} bytes is not a whole "
            f"number of {record}-byte samples")
    n_found = len(body) // record if record else 0
    if n_found != n_samples:
        raise ManifestMismatchError(
            f"{FEATURES_NAME}: manifest says {n_samples} samples, payload has {n_found}")
    flat = np.frombuffer(body, dtype="<f4").reshape(n_samples, n_ch, n_bands)

    samples = []
    for row, de in zip(index, flat):
        subject, session, trial, window, label = row
        samples.append(FeatureSample(subject, session, trial, window, label, de))

    raw_trials = []
    for rec in manifest.get("raw_trials", []):
        rpath = directory / rec["file"]
        rblob = rpath.read_bytes()
        if rblob[:len(MAGIC_RAW)] != MAGIC_RAW:
            raise BadMagicError(f"{rec['file']}: bad magic {rblob[:8]!r}")
        rbody = rblob[len(MAGIC_RAW):]
        fs = float(np.frombuffer(rbody[:8], dtype="<f8")[0])
        data_bytes = rbody[8:]
        expected = rec["channels"] * rec["samples"] * 4
        if len(data_bytes) < expected:
            raise TruncatedPayloadError(
                f"{rec['file']}: expected {expected} data bytes, found {len(data_bytes)}")
        if len(data_bytes) > expected:
            raise ManifestMismatchError(
                f"{rec['file']}: {len(data_bytes)} data bytes exceed manifest shape")
        data = np.frombuffer(data_bytes, dtype="<f4").reshape(
            rec["channels"], rec["samples"])
        raw_trials.append(RawTrial(rec["subject"], rec["session"], rec["trial"],
                                   rec["label"], fs, data))

    return SampleBank(manifest["dataset"], tuple(manifest["classes"]),
                      tuple(manifest["bands"]), montage, samples, raw_trials)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(dta: DtaParameters, path, optimizer=None) -> None:
    """Single-file checkpoint: parameters, batch-norm state, optional Adam
    moments, and the model config for shape validation on load."""
    arrays = []
    blob = bytearray()

    def put(name, kind, arr):
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        arrays.append({"name": name, "kind": kind, "shape": list(arr.shape),
                       "dtype": dt, "offset": len(blob)})
        blob.extend(raw)

    for name, t in dta.params.items():
        put(name, "param", t.data)
    for name, arr in dta.bn_state.items():
        put(name, "bn", arr)
    opt_header = None
    if optimizer is not None:
        opt_header = {"lr": optimizer.lr, "beta1": optimizer.beta1,
                      "beta2": optimizer.beta2, "eps": optimizer.eps,
                      "weight_decay": optimizer.weight_decay, "step": optimizer.step}
        for name, arr in optimizer.m.items():
            put(name, "opt_m", arr)
        for name, arr in optimizer.v.items():
            put(name, "opt_v", arr)

    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(dta.config),
        "optimizer": opt_header,
        "arrays": arrays,
    }).encode("utf-8")
    out = bytearray(MAGIC_CHECKPOINT)
    out += struct.pack("<I", len(header))
    out += header
    out += blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, expected_config: ModelConfig | None = None, dtype=None):
    """Load (DtaParameters, AdamState | None); optionally cast to `dtype`.

    Raises CheckpointError on bad magic, truncation, or a config that does
    not match `expected_config`.
    """
    from .training import AdamState

    blob = Path(path).read_bytes()
    if blob[:len(MAGIC_CHECKPOINT)] != MAGIC_CHECKPOINT:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < len(MAGIC_CHECKPOINT) + 4:
        raise CheckpointError(f"{path}: truncated header")
    hlen = int(np.frombuffer(blob, dtype="<u4", count=1,
                             offset=len(MAGIC_CHECKPOINT))[0])
    hstart = len(MAGIC_CHECKPOINT) + 4
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    body = blob[hstart + hlen:]

    config = _from_dict(ModelConfig, header["model_config"], "checkpoint.model_config")
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match expected {expected_config}")

    stored = {}
    for rec in header["arrays"]:
        itemsize = 8 if rec["dtype"] == "<f8" else 4
        nbytes = int(np.prod(rec["shape"], dtype=np.int64)) * itemsize if rec["shape"] else itemsize
        end = rec["offset"] + nbytes
        if end > len(body):
            raise CheckpointError(f"{path}: truncated payload at array {rec['name']}")
        arr = np.frombuffer(body[rec["offset"]:end], dtype=rec["dtype"]).reshape(rec["shape"])
        stored[(rec["kind"], rec["name"])] = arr

    dta = init_parameters(config, seed=0)
    cast = dtype
    for name, t in dta.params.items():
        if ("param", name) not in stored:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = stored[("param", name)]
        if tuple(arr.shape) != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        t.data = arr.astype(cast) if cast else arr.copy()
    for name in dta.bn_state:
        if ("bn", name) in stored:
            arr = stored[("bn", name)]
            dta.bn_state[name] = arr.astype(cast) if cast else arr.copy()

    opt = None
    if header.get("optimizer"):
        h = header["optimizer"]
        opt = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"],
                        eps=h["eps"], weight_decay=h["weight_decay"], step=h["step"])
        for (kind, name), arr in stored.items():
            if kind == "opt_m":
                opt.m[name] = arr.astype(cast) if cast else arr.copy()
            elif kind == "opt_v":
                opt.v[name] = arr.astype(cast) if cast else arr.copy()
    return dta, opt


# -- split protocols -------------------------------------------------------------

@dataclass(frozen=True)
class SplitProtocol:
    """Per-session trial partition by ordinal position, or a ratio rule."""

    name: str
    train_trials: tuple | None = None
    test_trials: tuple | None = None
    train_ratio: float | None = None

    def __post_init__(self):
        if self.train_ratio is not None:
            if not 0.0 < self.train_ratio < 1.0:
                raise SplitError(f"train_ratio must be in (0, 1), got {self.train_ratio}")
            if self.train_trials is not None or self.test_trials is not None:
                raise SplitError("give either trial lists or a ratio, not both")
            return
        if self.train_trials is None or self.test_trials is None:
            raise SplitError("protocol needs trial lists or a ratio")
        object.__setattr__(self, "train_trials", tuple(int(i) for i in self.train_trials))
        object.__setattr__(self, "test_trials", tuple(int(i) for i in self.test_trials))
        if not self.train_trials or not self.test_trials:
            raise SplitError("both split sides must be non-empty")
        if set(self.train_trials) & set(self.test_trials):
            raise SplitError("train and test trials overlap")


BUILTIN_PROTOCOLS = {
    "first9-last6": SplitProtocol("first9-last6", tuple(range(9)), tuple(range(9, 15))),
    "first16-last8": SplitProtocol("first16-last8", tuple(range(16)), tuple(range(16, 24))),
    "first10-last5": SplitProtocol("first10-last5", tuple(range(10)), tuple(range(10, 15))),
    "ratio80": SplitProtocol("ratio80", train_ratio=0.8),
}


def get_protocol(name: str) -> SplitProtocol:
    if name not in BUILTIN_PROTOCOLS:
        raise SplitError(f"unknown protocol {name!r}; "
                         f"choose from {sorted(BUILTIN_PROTOCOLS)}")
    return BUILTIN_PROTOCOLS[name]


def split_trial_ids(trial_ids, protocol: SplitProtocol):
    """Partition one session's sorted trial ids into (train, test) id sets."""
    ids = sorted(set(trial_ids))
    if protocol.train_ratio is not None:
        n_train = int(math.floor(protocol.train_ratio * len(ids)))
        if n_train < 1 or n_train >= len(ids):
            raise SplitError(
                f"ratio {protocol.train_ratio} leaves an empty side for {len(ids)} trials")
        return set(ids[:n_train]), set(ids[n_train:])
    needed = max(max(protocol.train_trials), max(protocol.test_trials))
    if needed >= len(ids):
        raise SplitError(
            f"protocol {protocol.name} wants trial #{needed}, session has {len(ids)}")
    return ({ids[i] for i in protocol.train_trials},
            {ids[i] for i in protocol.test_trials})


def apply_split(bank: SampleBank, protocol: SplitProtocol):
    """Disjoint (train, test) views of a bank; deterministic."""
    sessions = {}
    for s in bank.samples:
        sessions.setdefault((s.subject_id, s.session_id), set()).add(s.trial_id)
    train_keys, test_keys = set(), set()
    for (subj, sess), ids in sessions.items():
        train_ids, test_ids = split_trial_ids(ids, protocol)
        train_keys.update((subj, sess, t) for t in train_ids)
        test_keys.update((subj, sess, t) for t in test_ids)
    train = bank.filter(lambda s: (s.subject_id, s.session_id, s.trial_id) in train_keys)
    test = bank.filter(lambda s: (s.subject_id, s.session_id, s.trial_id) in test_keys)
    if len(train) == 0 or len(test) == 0:
        raise SplitError("split produced an empty side")
    return train, test


# -- synthetic data ---------------------------------------------------------------

def _class_names(n):
    return tuple(f"class{i}" for i in range(n))


def synth_factors(spec: SynthSpec):
    """The generating factors (class means, subject shifts), seed-determined.

    Drawn first from the generator stream, so tests can recover the exact
    factors behind a generated bank.
    """
    rng = np.random.default_rng(spec.seed)
    mu_class = rng.normal(0.0, spec.class_mean_scale,
                          size=(spec.n_classes, spec.n_channels, spec.n_bands))
    delta_subject = rng.normal(0.0, spec.subject_shift_std,
                               size=(spec.n_subjects, spec.n_channels, spec.n_bands))
    return mu_class, delta_subject, rng


def _synth_montage(n_channels: int) -> ChannelMontage:
    ref = default_montage()
    if n_channels == len(ref):
        return ref
    if n_channels < len(ref):
        return ChannelMontage(ref.names[:n_channels], ref.positions[:n_channels])
    # evenly spread extra electrodes on a Fibonacci sphere
    i = np.arange(n_channels)
    z = 1.0 - 2.0 * (i + 0.5) / n_channels
    r = np.sqrt(1.0 - z * z)
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    pos = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return ChannelMontage(tuple(f"CH{k}" for k in range(n_channels)), pos)


def gen_synthetic(spec: SynthSpec) -> SampleBank:
    """Seed-deterministic synthetic bank with class/subject/noise structure.

    features mode: each sample is mu[class] + delta[subject] + noise.
    timeseries mode: per-band noise carriers at 200 Hz are scaled so the
    per-band log-amplitude carries the same mu + delta structure, and raw
    trials (not features) are stored; feature extraction then recovers
    separable features.
    """
    mu_class, delta_subject, rng = synth_factors(spec)
    montage = _synth_montage(spec.n_channels)
    bands = DEFAULT_BANDS if spec.n_bands == len(DEFAULT_BANDS) else None
    band_names = (bands.names if bands is not None
                  else tuple(f"band{i}" for i in range(spec.n_bands)))

    if spec.mode == "features":
        samples = []
        for subj in range(spec.n_subjects):
            for trial in range(spec.trials_per_subject):
                label = trial % spec.n_classes
                base = mu_class[label] + delta_subject[subj]
                for w in range(spec.samples_per_trial):
                    de = base + rng.normal(0.0, spec.sample_noise_std,
                                           size=(spec.n_channels, spec.n_bands))
                    samples.append(FeatureSample(subj, 0, trial, w, label, de))
        return SampleBank("synthetic-features", _class_names(spec.n_classes),
                          band_names, montage, samples, [])

    if bands is None:
        raise BankError("timeseries mode requires the default 5-band layout")
    n_samples = int(spec.samples_per_trial * SYNTH_WINDOW_S * SYNTH_FS)
    trials = []
    for subj in range(spec.n_subjects):
        for trial in range(spec.trials_per_subject):
            label = trial % spec.n_classes
            log_amp = mu_class[label] + delta_subject[subj]
            data = np.zeros((spec.n_channels, n_samples))
            for b, (_, lo, hi) in enumerate(bands.bands):
                carrier = rng.standard_normal((spec.n_channels, n_samples))
                carrier = dsp.bandpass(carrier, lo, hi, SYNTH_FS)
                carrier /= np.maximum(carrier.std(axis=1, keepdims=True), 1e-12)
                data += np.exp(log_amp[:, b:b + 1]) * carrier
            trials.append(RawTrial(subj, 0, trial, label, SYNTH_FS,
                                   data.astype(np.float32)))
    return SampleBank("synthetic-timeseries", _class_names(spec.n_classes),
                      band_names, montage, [], trials)


def extract_bank_features(bank: SampleBank, window_s=SYNTH_WINDOW_S,
                          tail_s=dsp.DEFAULT_TAIL_SECONDS, smooth=True,
                          preprocess=False, reject_segments=False) -> SampleBank:
    """Feature bank from a raw-trial bank: per-trial conditioning, windowed
    band differential entropy, optional segment rejection and smoothing."""
    if not bank.raw_trials:
        raise BankError("bank has no raw trials to extract features from")
    if len(bank.bands) != len(DEFAULT_BANDS):
        raise BankError("feature extraction uses the default 5-band layout")
    band_spec = DEFAULT_BANDS
    samples = []
    for trial in bank.raw_trials:
        t = dsp.preprocess_trial(trial, bank.montage) if preprocess else trial
        t = dsp.trial_tail(t, tail_s)
        trial_samples = dsp.extract_de(t, band_spec, window_s, tail_s=None)
        if reject_segments:
            keep = dsp.reject_bad_segments(t, window_s)
            trial_samples = [s for s, k in zip(trial_samples, keep) if k]
            for w, s in enumerate(trial_samples):
                s.window_index = w
        if not trial_samples:
            continue
        if smooth:
            trial_samples = dsp.smooth_samples(trial_samples)
        samples.extend(trial_samples)
    return SampleBank(bank.dataset + "+features", bank.classes, bank.bands,
                      bank.montage, samples, bank.raw_trials)
