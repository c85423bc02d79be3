"""RefCOCO-aligned annotation records: run-length masks, export, parsing.

The annotation file is a single JSON document with top-level sections
``images``, ``annotations``, ``refs``, and ``categories``:

    images:       [{id, file_name, height, width, source_id}]
    annotations:  [{id, image_id, category_id, segmentation, area, bbox, iscrowd}]
    refs:         [{ref_id, ann_id, image_id, category_id, split, file_name,
                    sentences: [{sent_id, raw, tokens}], sent_ids}]
    categories:   [{id, name}]

Masks are stored as uncompressed counts-form RLE in column-major scan order
(the usual RefCOCO tooling convention): ``counts[0]`` is the number of
leading zeros, then runs alternate value.  ``bbox`` is the tight [x, y, w, h]
box of the mask.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ExportError


def rle_encode(mask):
    """Binary H x W mask -> {"counts": [...], "size": [H, W]}."""
    mask = np.asarray(mask)
    h, w = mask.shape
    flat = (mask != 0).astype(np.uint8).flatten(order="F")
    if flat.size == 0:
        return {"counts": [], "size": [h, w]}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if int(flat[0]) == 1:
        counts = [0] + counts
    return {"counts": [int(c) for c in counts], "size": [int(h), int(w)]}


def rle_decode(rle):
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for c in rle["counts"]:
        flat[pos:pos + c] = val
        pos += c
        val ^= 1
    if pos != h * w:
        raise ContractError(f"RLE covers {pos} pixels, mask has {h * w}")
    return flat.reshape((h, w), order="F")


def bbox_from_mask(mask):
    """Tight [x, y, w, h] box; [0, 0, 0, 0] for an empty mask."""
    ys, xs = np.nonzero(np.asarray(mask))
    if ys.size == 0:
        return [0, 0, 0, 0]
    return [int(xs.min()), int(ys.min()),
            int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


@dataclass
class ReferringAnnotation:
    """One (image, category, sentence, mask) record."""

    ref_id: int
    ann_id: int
    image_id: int
    file_name: str
    split: str
    category_id: int
    category: str
    sent_id: int
    raw: str
    tokens: list
    segmentation: dict
    area: int
    bbox: list

    def validate(self, max_words=10, blacklist=()):
        if len(self.raw.split()) > max_words:
            raise ExportError(
                f"ref {self.ref_id}: sentence exceeds {max_words} words: {self.raw!r}")
        lowered = self.raw.lower()
        for phrase in blacklist:
            if phrase in lowered:
                raise ExportError(
                    f"ref {self.ref_id}: blacklisted phrase {phrase!r} in {self.raw!r}")
        decoded = rle_decode(self.segmentation)
        if int(decoded.sum()) != self.area:
            raise ExportError(
                f"ref {self.ref_id}: RLE popcount {int(decoded.sum())} != area {self.area}")
        if bbox_from_mask(decoded) != list(self.bbox):
            raise ExportError(f"ref {self.ref_id}: bbox does not bound the mask")


def export_annotations(path, annotations, images, categories,
                       max_words=10, blacklist=()):
    """Write the annotation document; round-trips exactly through
    :func:`load_annotations`.  Duplicate ref ids are an export error."""
    seen = set()
    for ann in annotations:
        if ann.ref_id in seen:
            raise ExportError(f"duplicate ref_id {ann.ref_id}")
        seen.add(ann.ref_id)
        ann.validate(max_words=max_words, blacklist=blacklist)

    doc = {
        "images": [
            {"id": im["id"], "file_name": im["file_name"],
             "height": im["height"], "width": im["width"],
             "source_id": im["source_id"]}
            for im in images
        ],
        "annotations": [
            {"id": a.ann_id, "image_id": a.image_id, "category_id": a.category_id,
             "segmentation": a.segmentation, "area": a.area, "bbox": a.bbox,
             "iscrowd": 0}
            for a in annotations
        ],
        "refs": [
            {"ref_id": a.ref_id, "ann_id": a.ann_id, "image_id": a.image_id,
             "category_id": a.category_id, "split": a.split,
             "file_name": a.file_name,
             "sentences": [{"sent_id": a.sent_id, "raw": a.raw, "tokens": a.tokens}],
             "sent_ids": [a.sent_id]}
            for a in annotations
        ],
        "categories": [{"id": cid, "name": name}
                       for cid, name in sorted(categories.items())],
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ExportError(f"cannot write annotations to {path}: {exc}") from exc
    return doc


def load_annotations(path):
    """Parse an annotation document back into ReferringAnnotation records.

    Returns (annotations, images, categories)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ExportError(f"cannot read annotations from {path}: {exc}") from exc
    categories = {c["id"]: c["name"] for c in doc["categories"]}
    ann_by_id = {a["id"]: a for a in doc["annotations"]}
    annotations = []
    for ref in doc["refs"]:
        ann = ann_by_id[ref["ann_id"]]
        sent = ref["sentences"][0]
        annotations.append(ReferringAnnotation(
            ref_id=ref["ref_id"], ann_id=ref["ann_id"], image_id=ref["image_id"],
            file_name=ref["file_name"], split=ref["split"],
            category_id=ref["category_id"], category=categories[ref["category_id"]],
            sent_id=sent["sent_id"], raw=sent["raw"], tokens=list(sent["tokens"]),
            segmentation=ann["segmentation"], area=ann["area"],
            bbox=list(ann["bbox"])))
    return annotations, doc["images"], categories
