"""Spatial-semantic VQA benchmark: generation, splits, and scoring."""
from __future__ import annotations

import enum
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EmptyPool, UnknownItemId
from .semantics import AnnotationRecord, Correspondence, RecordClass

log = logging.getLogger(__name__)


class Category(enum.Enum):
    TYPE_IDENTIFICATION = "type_identification"
    TASK_ASSOCIATION = "task_association"
    TASK_TO_PRIMITIVE = "task_to_primitive"


CATEGORY_SHORT = {
    Category.TYPE_IDENTIFICATION: "t1",
    Category.TASK_ASSOCIATION: "t2",
    Category.TASK_TO_PRIMITIVE: "t3",
}

# Report keys follow the three-task naming convention.
CATEGORY_REPORT_KEY = {
    Category.TYPE_IDENTIFICATION: "task1",
    Category.TASK_ASSOCIATION: "task2",
    Category.TASK_TO_PRIMITIVE: "task3",
}

N_OPTIONS = 4


@dataclass
class VQAItem:
    item_id: str
    object_id: str
    category: Category
    question: str
    image_ref: str
    options: list[str]
    answer_index: int

    def __post_init__(self):
        if len(self.options) != N_OPTIONS:
            raise ValueError("items carry exactly four options")
        if len(set(self.options)) != N_OPTIONS:
            raise ValueError("options must be pairwise distinct")
        if not (0 <= self.answer_index < N_OPTIONS):
            raise ValueError("answer_index out of range")

    def to_doc(self) -> dict:
        return {
            "item_id": self.item_id,
            "object_id": self.object_id,
            "category": self.category.value,
            "question": self.question,
            "image": self.image_ref,
            "options": self.options,
            "answer_index": self.answer_index,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "VQAItem":
        return cls(
            item_id=doc["item_id"],
            object_id=doc["object_id"],
            category=Category(doc["category"]),
            question=doc["question"],
            image_ref=doc["image"],
            options=list(doc["options"]),
            answer_index=int(doc["answer_index"]),
        )


@dataclass
class GenerationResult:
    items: list[VQAItem]
    skipped: list[dict] = field(default_factory=list)


def _rng_for(seed: int, object_id: str, category: Category) -> random.Random:
    return random.Random(f"{seed}|{object_id}|{category.value}")


def _visible_entries(record: AnnotationRecord) -> list[tuple[Correspondence, int, int]]:
    """Entries whose referenced keypoint is visible somewhere.

    Visibility means the keypoint was lifted from at least one view with
    valid depth, i.e. it has support; the first supporting view hosts the
    question image.
    """
    out = []
    for c in record.correspondences:
        if not isinstance(c.pos_id, int):
            continue
        try:
            kp = record.keypoint(c.pos_id)
        except KeyError:
            continue
        if not kp.support:
            continue
        view_id = int(kp.support[0].get("view_id", 0))
        out.append((c, c.pos_id, view_id))
    return out


def _image_ref(object_id: str, view_id: int) -> str:
    return f"{object_id}/overlay_view_{view_id}.png"


def _finish_item(
    rng: random.Random,
    object_id: str,
    category: Category,
    counter: int,
    question: str,
    image_ref: str,
    correct: str,
    distractors: list[str],
) -> VQAItem:
    options = [correct] + distractors
    rng.shuffle(options)
    return VQAItem(
        item_id=f"{object_id}/{CATEGORY_SHORT[category]}/{counter:03d}",
        object_id=object_id,
        category=category,
        question=question,
        image_ref=image_ref,
        options=options,
        answer_index=options.index(correct),
    )


def _stage_pool(records: list[AnnotationRecord]) -> list[tuple[str, str]]:
    """(object_id, stage) pairs across all records, deduplicated, in order."""
    seen = set()
    pool = []
    for record in records:
        for c in record.correspondences:
            key = (record.object_id, c.stage)
            if c.stage and key not in seen:
                seen.add(key)
                pool.append(key)
    return pool


def generate_questions(
    records: list[AnnotationRecord],
    category: Category,
    seed: int,
) -> GenerationResult:
    """Single-choice items for one category, deterministic under the seed."""
    records = sorted(records, key=lambda r: r.object_id)
    all_stages = _stage_pool(records)
    items: list[VQAItem] = []
    skipped: list[dict] = []

    for record in records:
        rng = _rng_for(seed, record.object_id, category)
        counter = 0
        entries = _visible_entries(record)
        eligible_ids = {id(c) for c, _, _ in entries}
        invisible = [
            c for c in record.correspondences
            if isinstance(c.pos_id, int) and id(c) not in eligible_ids
        ]
        for c in invisible:
            skipped.append({
                "object_id": record.object_id,
                "category": category.value,
                "reason": "primitive_not_visible",
                "stage": c.stage,
            })
        for c, kp_index, view_id in entries:
            image = _image_ref(record.object_id, view_id)
            if category is Category.TYPE_IDENTIFICATION:
                correct = c.record_class.value
                others = [k.value for k in RecordClass if k is not c.record_class]
                distractors = rng.sample(others, N_OPTIONS - 1)
                question = (
                    f"A primitive is marked at point {kp_index} in the image. "
                    "What is its functional category?"
                )
            elif category is Category.TASK_ASSOCIATION:
                correct = c.stage
                referencing = {
                    e.stage for e in record.correspondences
                    if isinstance(e.pos_id, int) and e.pos_id == kp_index
                }
                local = [
                    s for (obj, s) in all_stages
                    if obj == record.object_id and s not in referencing
                ]
                foreign = [
                    s for (obj, s) in all_stages
                    if obj != record.object_id and s != correct and s not in local
                ]
                pool = list(dict.fromkeys(local + foreign))
                if len(pool) < N_OPTIONS - 1:
                    skipped.append({
                        "object_id": record.object_id,
                        "category": category.value,
                        "reason": "insufficient_distractors",
                        "stage": c.stage,
                    })
                    continue
                distractors = rng.sample(pool, N_OPTIONS - 1)
                question = (
                    f"Which task stage uses the primitive marked at point {kp_index} "
                    "in the image?"
                )
            else:  # TASK_TO_PRIMITIVE
                correct = f"point {kp_index}"
                referenced = {
                    e.pos_id for e in record.correspondences
                    if isinstance(e.pos_id, int) and e.stage == c.stage
                }
                visible_ids = sorted(
                    k.index for k in record.keypoints
                    if k.support and k.index not in referenced
                )
                if len(visible_ids) < N_OPTIONS - 1:
                    skipped.append({
                        "object_id": record.object_id,
                        "category": category.value,
                        "reason": "insufficient_distractors",
                        "stage": c.stage,
                    })
                    continue
                distractors = [f"point {i}" for i in rng.sample(visible_ids, N_OPTIONS - 1)]
                question = (
                    f'Task stage: "{c.stage}". Which marked point does this stage require?'
                )
            items.append(
                _finish_item(rng, record.object_id, category, counter, question, image, correct, distractors)
            )
            counter += 1
    return GenerationResult(items=items, skipped=skipped)


def generate_all(records: list[AnnotationRecord], seed: int) -> GenerationResult:
    items: list[VQAItem] = []
    skipped: list[dict] = []
    for category in Category:
        result = generate_questions(records, category, seed)
        items.extend(result.items)
        skipped.extend(result.skipped)
    items.sort(key=lambda i: i.item_id)
    return GenerationResult(items=items, skipped=skipped)


# --- splits ------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[VQAItem]
    test_in: list[VQAItem]
    test_ood: list[VQAItem]
    seed: int


def train_count(n: int, train_frac: float = 0.8) -> int:
    return math.floor(train_frac * n)


def split_dataset(
    items: list[VQAItem],
    ood_object_ids: set[str],
    seed: int,
    train_frac: float = 0.8,
) -> DatasetSplit:
    """OOD objects go wholly to test_ood; the rest split 80/20 per category.

    The per-category split uses a seeded shuffle and floors the train
    count, so category proportions survive exactly.
    """
    if not items:
        raise EmptyPool("no items to split")
    ood = [i for i in items if i.object_id in ood_object_ids]
    base = [i for i in items if i.object_id not in ood_object_ids]
    train: list[VQAItem] = []
    test_in: list[VQAItem] = []
    for category in Category:
        pool = [i for i in base if i.category is category]
        rng = random.Random(f"{seed}|split|{category.value}")
        rng.shuffle(pool)
        cut = train_count(len(pool), train_frac)
        train.extend(pool[:cut])
        test_in.extend(pool[cut:])
    if not train and not test_in:
        log.warning("every item belongs to an OOD object; train and test_in are empty")
    key = lambda i: i.item_id
    return DatasetSplit(
        train=sorted(train, key=key),
        test_in=sorted(test_in, key=key),
        test_ood=sorted(ood, key=key),
        seed=seed,
    )


# --- evaluation --------------------------------------------------------------

def evaluate(predictions: dict[str, int], items: list[VQAItem]) -> dict:
    """Accuracy per category plus the item-weighted overall mean.

    Missing predictions count as wrong and are reported; predictions for
    unknown item ids mean a corrupt file and raise.
    """
    known = {i.item_id for i in items}
    unknown = set(predictions) - known
    if unknown:
        raise UnknownItemId(f"predictions reference unknown items: {sorted(unknown)[:5]}")
    correct = {c: 0 for c in Category}
    total = {c: 0 for c in Category}
    missing = 0
    for item in items:
        total[item.category] += 1
        if item.item_id not in predictions:
            missing += 1
            continue
        if int(predictions[item.item_id]) == item.answer_index:
            correct[item.category] += 1
    report = {
        "overall_convention": "item-weighted micro-average",
    }
    for category in Category:
        key = CATEGORY_REPORT_KEY[category]
        report[key] = (correct[category] / total[category]) if total[category] else None
    n_total = sum(total.values())
    n_correct = sum(correct.values())
    report["overall"] = (n_correct / n_total) if n_total else None
    report["counts"] = {
        CATEGORY_REPORT_KEY[c]: total[c] for c in Category
    }
    report["counts"]["total"] = n_total
    report["missing_predictions"] = missing
    return report


# --- JSONL IO ----------------------------------------------------------------

def write_items(path: Path, items: list[VQAItem]):
    with open(path, "w", encoding="utf-8") as f:
        for item in items:
            f.write(json.dumps(item.to_doc(), ensure_ascii=False) + "\n")


def read_items(path: Path) -> list[VQAItem]:
    items = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                items.append(VQAItem.from_doc(json.loads(line)))
    return items


def read_predictions(path: Path) -> dict[str, int]:
    preds: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            preds[doc["item_id"]] = int(doc["choice"])
    return preds
