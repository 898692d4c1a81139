"""Batch inference and file emission.

Output contracts (must match the consumer pipeline bit for bit):

* embeddings: magic ``GSEM``, little-endian u32 n and d, then n*d
  little-endian float64 values row-major, rows in message-file order.
* scores: CSV header ``negative,neutral,positive`` then one probability
  triple per message, full-precision reprs.

Reruns with the same checkpoint revision and batch size are byte-identical;
the batch size is part of the reproducibility contract because framework
kernels may round differently across batch shapes.
"""

import datetime
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

DEFAULT_CHECKPOINT = "cardiffnlp/twitter-roberta-base-sentiment"
EXPECTED_DIM = 768

GSEM_MAGIC = b"GSEM"


class ExportError(Exception):
    pass


def read_message_texts(path):
    """node-ordered texts from a JSON-lines message file."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"messages file not found: {path}")
    texts = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExportError(f"messages line {line_no}: malformed JSON ({exc.msg})")
            text = obj.get("text")
            if text is None or not str(text).strip():
                raise ExportError(
                    f"messages line {line_no} (node_id {obj.get('node_id')}): "
                    "missing text; the exporter needs every message body"
                )
            texts.append(str(text))
    if not texts:
        raise ExportError(f"{path}: no messages")
    return texts


def write_gsem(path, values):
    values = np.ascontiguousarray(values, dtype="<f8")
    n, d = values.shape
    with Path(path).open("wb") as fh:
        fh.write(GSEM_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(values.tobytes())


def write_score_csv(path, scores):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("negative,neutral,positive\n")
        for row in np.asarray(scores, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _sha256(path):
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_model(checkpoint, revision):
    import torch
    from transformers import AutoModelForSequenceClassification, AutoTokenizer

    kwargs = {}
    if revision:
        kwargs["revision"] = revision
    try:
        tokenizer = AutoTokenizer.from_pretrained(checkpoint, **kwargs)
        model = AutoModelForSequenceClassification.from_pretrained(checkpoint, **kwargs)
    except Exception as exc:
        raise ExportError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _score_column_order(model):
    """Column permutation mapping model outputs to (negative, neutral, positive)."""
    id2label = getattr(model.config, "id2label", None) or {}
    names = {i: str(label).lower() for i, label in id2label.items()}
    wanted = ("negative", "neutral", "positive")
    if set(names.values()) >= set(wanted):
        by_name = {name: i for i, name in names.items()}
        return [by_name[w] for w in wanted]
    # generic LABEL_0/1/2 checkpoints already use this convention
    return [0, 1, 2]


def export(messages_path, out_dir, checkpoint=DEFAULT_CHECKPOINT, revision=None,
           batch_size=16, expect_dim=EXPECTED_DIM, max_length=512):
    """Run the checkpoint over every message and emit the pipeline inputs.

    Returns the manifest dict.  The embedding row is the sequence-start
    token's final hidden state; the score row is the classifier softmax.
    """
    import torch

    texts = read_message_texts(messages_path)
    tokenizer, model = _load_model(checkpoint, revision)
    hidden = int(model.config.hidden_size)
    if expect_dim is not None and hidden != expect_dim:
        raise ExportError(
            f"checkpoint hidden size {hidden} does not match the manifest "
            f"dimension {expect_dim}"
        )
    order = _score_column_order(model)

    embeddings = np.empty((len(texts), hidden), dtype=np.float64)
    scores = np.empty((len(texts), 3), dtype=np.float64)
    for start in range(0, len(texts), batch_size):
        batch = texts[start:start + batch_size]
        enc = tokenizer(batch, return_tensors="pt", padding=True,
                        truncation=True, max_length=max_length)
        out = model(**enc, output_hidden_states=True)
        pooled = out.hidden_states[-1][:, 0, :]
        probs = torch.softmax(out.logits, dim=-1)[:, order]
        stop = start + len(batch)
        embeddings[start:stop] = pooled.numpy().astype(np.float64)
        scores[start:stop] = probs.numpy().astype(np.float64)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_gsem(out_dir / "embeddings.gsem", embeddings)
    write_score_csv(out_dir / "scores.csv", scores)

    manifest = {
        "checkpoint": str(checkpoint),
        "revision": revision or "unspecified",
        "corpus_sha256": _sha256(messages_path),
        "n": len(texts),
        "d": hidden,
        "batch_size": batch_size,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    weights = Path(checkpoint) / "model.safetensors"
    if weights.exists():
        manifest["weights_sha256"] = _sha256(weights)
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
