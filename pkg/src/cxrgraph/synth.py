"""Synthetic corpus with a planted label-generating process.

Each disease has a primary region (first anatomy entry in the knowledge
graph) and a secondary region. Per study and disease one of three states is
drawn:

* overt - the disease is present and a fixed direction ``u1`` is added to the
  primary region's feature; reported as a certain positive.
* subtle - an ambiguous appearance of level ``p`` in {0.7, 0.5, 0.3}; the
  disease is present with probability ``p`` (so hedged reports are
  calibrated) and ``strength * p / 0.7 * u2`` is added to the secondary
  region. Hedging readers write the matching uncertainty phrase; certain
  readers report the true state.
* absent - no signal; reported as "no X" or not at all.

Report text is assembled from the rule-table phrases, and the corpus labels
come from running the labeler over that text.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import split_dataset
from .graph_builder import REGIONS, AnatomicalRegion, KnowledgeGraphConfig, load_knowledge_graph, load_layout
from .io import write_feature_file, write_jsonl
from .label_extractor import extract_labels
from .rules import DISEASES, RuleSet, load_rules

KEYWORDS = {
    "Atelectasis": ["atelectasis", "collapse"],
    "Blunting of costophrenic angle": ["blunting of costophrenic angle"],
    "Calcification": ["calcification"],
    "Cardiomegaly": ["cardiomegaly", "cardiac enlargement", "enlarged heart"],
    "Consolidation": ["consolidation"],
    "Edema": ["edema", "pulmonary congestion"],
    "Emphysema": ["emphysema"],
    "Fracture": ["fracture"],
    "Granuloma": ["granuloma"],
    "Hernia": ["hernia"],
    "Lung Opacity": ["opacity", "airspace disease", "infiltrate"],
    "Pleural Effusion": ["pleural effusion", "pleural fluid"],
    "Pleural Thickening": ["pleural thickening"],
    "Pneumonia": ["pneumonia", "infection"],
    "Pneumothorax": ["pneumothorax"],
    "Scoliosis": ["scoliosis"],
    "Tortuosity of the thoracic aorta": ["tortuosity of the thoracic aorta"],
    "Vascular congestion": ["vascular congestion"],
}
SEVERITY_WORDS = [
    "mild", "small", "trace", "minimal", "moderate", "mild to moderate", "severe", "massive", "moderate to large",
]
TEMPLATES = {
    1.0: ["{sev}{kw}.", "there is {sev}{kw}.", "{sev}{kw} is present."],
    0.7: ["likely {sev}{kw}.", "{sev}{kw} is probable.", "this may represent {kw}."],
    0.5: ["possible {sev}{kw}.", "{kw} might be present."],
    0.3: ["{kw} cannot be excluded.", "{kw} is not excluded.", "difficult to exclude {kw}."],
    0.0: ["no {kw}.", "there is no {kw}.", "no evidence of {kw}."],
}
FILLER = ["pa and lateral views of the chest were obtained.", "osseous structures are unremarkable."]
EMPTY_IMPRESSION = "no acute cardiopulmonary process."
SUBTLE_LEVELS = (0.7, 0.5, 0.3)


@dataclass(frozen=True)
class SynthConfig:
    n_studies: int = 2000
    d_in: int = 16
    offset_scale: float = 0.5
    seed: int = 0
    overt_rate: float = 0.15
    subtle_rate: float = 0.05
    certain_fraction: float = 0.3
    negation_rate: float = 0.3
    strength: float = 4.0
    noise: float = 0.5
    missing_rate: float = 0.01
    box_jitter: float = 0.01
    impression_rate: float = 0.4


@dataclass
class SynthStudy:
    study_id: str
    text: str
    regions: list[AnatomicalRegion]
    present: np.ndarray  # (18,) true disease state
    state: list[str]  # per disease: overt / subtle / absent
    level: np.ndarray  # (18,) subtle level, 0 otherwise
    certain_reader: bool


class PlantedWorld:
    """Fixed per-seed quantities: region offsets, signal regions and directions."""

    def __init__(self, d_in: int, seed: int, kg: KnowledgeGraphConfig | None = None, offset_scale: float = 0.5):
        kg = kg or load_knowledge_graph()
        rng = np.random.default_rng([seed, 0])
        self.region_offset = rng.normal(0.0, offset_scale, size=(len(REGIONS), d_in))
        by_disease: dict[str, list[str]] = {d: [] for d in DISEASES}
        for region, disease in kg.anatomy_disease_edges:
            by_disease[disease].append(region)
        self.primary = np.array([REGIONS.index(by_disease[d][0]) for d in DISEASES])
        self.secondary = np.array([REGIONS.index(by_disease[d][min(1, len(by_disease[d]) - 1)]) for d in DISEASES])
        u = rng.normal(size=(2, len(DISEASES), d_in))
        self.directions = u / np.linalg.norm(u, axis=-1, keepdims=True)


def _sentence(rng, level: float, disease: str, with_severity: bool) -> str:
    kw = KEYWORDS[disease][rng.integers(len(KEYWORDS[disease]))]
    sev = SEVERITY_WORDS[rng.integers(len(SEVERITY_WORDS))] + " " if with_severity else ""
    tpl = TEMPLATES[level][rng.integers(len(TEMPLATES[level]))]
    return tpl.format(kw=kw, sev=sev)


def generate_study(i: int, cfg: SynthConfig, world: PlantedWorld, layout, rng) -> SynthStudy:
    C = len(DISEASES)
    feats = world.region_offset + rng.normal(0.0, cfg.noise, size=world.region_offset.shape)
    certain_reader = bool(rng.random() < cfg.certain_fraction)
    present = np.zeros(C)
    level = np.zeros(C)
    states = []
    findings, impression = [], []
    for c, disease in enumerate(DISEASES):
        u = rng.random()
        if u < cfg.overt_rate:
            states.append("overt")
            present[c] = 1
            feats[world.primary[c]] += cfg.strength * world.directions[0, c]
            written = 1.0
        elif u < cfg.overt_rate + cfg.subtle_rate:
            states.append("subtle")
            p = SUBTLE_LEVELS[rng.integers(len(SUBTLE_LEVELS))]
            level[c] = p
            present[c] = float(rng.random() < p)
            feats[world.secondary[c]] += cfg.strength * p / SUBTLE_LEVELS[0] * world.directions[1, c]
            written = (1.0 if present[c] else 0.0) if certain_reader else p
        else:
            states.append("absent")
            written = 0.0 if rng.random() < cfg.negation_rate else None
        if written is None:
            continue
        sent = _sentence(rng, written, disease, with_severity=written > 0 and rng.random() < 0.5)
        (impression if rng.random() < cfg.impression_rate else findings).append(sent)

    regions = []
    for r, name in enumerate(REGIONS):
        if rng.random() < cfg.missing_rate:
            continue
        x, y, w, h = layout[name]
        x += rng.normal(0.0, cfg.box_jitter)
        y += rng.normal(0.0, cfg.box_jitter)
        w *= 1.0 + rng.normal(0.0, 3 * cfg.box_jitter)
        h *= 1.0 + rng.normal(0.0, 3 * cfg.box_jitter)
        x, y = float(np.clip(x, 0.0, 0.95)), float(np.clip(y, 0.0, 0.95))
        w, h = float(np.clip(w, 0.01, 1.0 - x)), float(np.clip(h, 0.01, 1.0 - y))
        regions.append(AnatomicalRegion(name, (x, y, w, h), feats[r].astype(np.float32).astype(float)))

    text = "FINDINGS: " + " ".join(FILLER + findings) + "\nIMPRESSION: " + (" ".join(impression) or EMPTY_IMPRESSION)
    return SynthStudy(f"study{i:05d}", text, regions, present, states, level, certain_reader)


def generate_corpus(cfg: SynthConfig, kg: KnowledgeGraphConfig | None = None) -> tuple[list[SynthStudy], PlantedWorld]:
    world = PlantedWorld(cfg.d_in, cfg.seed, kg, cfg.offset_scale)
    layout = load_layout()
    rng = np.random.default_rng([cfg.seed, 1])
    return [generate_study(i, cfg, world, layout, rng) for i in range(cfg.n_studies)], world


def write_synthetic_dataset(out_dir, cfg: SynthConfig, rules: RuleSet | None = None, split_seed: int | None = None):
    """Generate a corpus and write the dataset files used by the CLI.

    Files: reports.jsonl, labels.jsonl, regions.jsonl, features.rgnf,
    split.json, truth.jsonl, synth_config.json.
    """
    rules = rules or load_rules()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    studies, world = generate_corpus(cfg)
    labels = [extract_labels(s.text, s.study_id, rules) for s in studies]
    write_jsonl(out / "reports.jsonl", ({"study_id": s.study_id, "text": s.text} for s in studies))
    write_jsonl(out / "labels.jsonl", (v.to_record() for v in labels))
    offsets = write_feature_file(out / "features.rgnf", [np.array([r.feature for r in s.regions]) for s in studies])
    write_jsonl(
        out / "regions.jsonl",
        (
            {
                "study_id": s.study_id,
                "feature_file": "features.rgnf",
                "regions": [
                    {"name": r.name, "bbox": [round(v, 6) for v in r.bbox], "feature_file_offset": off}
                    for r, off in zip(s.regions, offs)
                ],
            }
            for s, offs in zip(studies, offsets)
        ),
    )
    write_jsonl(
        out / "truth.jsonl",
        (
            {
                "study_id": s.study_id,
                "present": s.present.astype(int).tolist(),
                "state": s.state,
                "level": s.level.tolist(),
                "certain_reader": s.certain_reader,
                "signal_region": [REGIONS[i] for i in world.primary],
            }
            for s in studies
        ),
    )
    split = split_dataset(labels, cfg.seed if split_seed is None else split_seed)
    split.save(out / "split.json")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=1) + "\n")
    return studies, labels, split
