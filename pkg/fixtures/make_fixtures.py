"""Regenerate the bundled synthetic fixtures. Run from the repo root:

    python fixtures/make_fixtures.py

Deterministic: committed outputs match a fresh run byte for byte.
"""

import json
from pathlib import Path

import numpy as np

from tinylm.finetune import FinetuneRecord, render_prompt

HERE = Path(__file__).parent

LABELS = ["Tap", "Double", "Hold"]
VALUE_CHOICES = {
    "Tap": [0, 10, 20, 30],
    "Double": [40, 50, 60],
    "Hold": [70, 80, 90, 100],
}
INSTRUCTION = "Classify the gesture. Answer Tap, Double, or Hold."

FILLER = [
    "The sensor node samples the light channel twelve times per second.",
    "Edge boards keep every reading local, so no network round trip is needed.",
    "A proximity spike followed by a fast fall usually means a quick tap.",
    "Holding a hand above the sensor keeps the proximity value high and steady.",
    "Two short spikes in a row are the signature of a double tap gesture.",
    "Readings are normalized to the range zero to one hundred before training.",
    "The gateway logs each classification together with a timestamp.",
    "Ambient light changes slowly compared with deliberate hand gestures.",
    "Small models answer within a second even on a single board computer.",
    "Battery powered nodes prefer short prompts to stay within the context window.",
    "The red, green and blue channels react differently to skin reflection.",
    "Calibration repeats whenever the deployment light level changes.",
]


def make_record(label: str, rng: np.random.Generator) -> FinetuneRecord:
    vals = rng.choice(VALUE_CHOICES[label], size=3)
    return FinetuneRecord(
        instruction=INSTRUCTION,
        input=f"Proximity: [{vals[0]}, {vals[1]}, {vals[2]}]",
        response=label,
    )


def main() -> None:
    # fine-tune records: 20 instances, 3 balanced-ish labels
    rng = np.random.default_rng(42)
    records = [make_record(LABELS[i % 3], rng) for i in range(20)]
    with open(HERE / "finetune_records.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {"instruction": rec.instruction, "input": rec.input, "output": rec.response}
                )
                + "\n"
            )

    # eval cases: the same memorized prompts, first-token label matching
    with open(HERE / "eval_cases.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "prompt": render_prompt(rec, include_response=False),
                        "expected": rec.response,
                        "labels": LABELS,
                    }
                )
                + "\n"
            )

    # pre-training text: rule-consistent rendered examples (fresh inputs) plus filler prose
    corpus_rng = np.random.default_rng(7)
    docs = []
    for i in range(90):
        label = LABELS[int(corpus_rng.integers(3))]
        text = render_prompt(make_record(label, corpus_rng), include_response=True)
        docs.append(text.replace("<|endoftext|>", ""))
        if i % 8 == 0:
            docs.append(FILLER[(i // 8) % len(FILLER)])
    (HERE / "text_corpus.txt").write_text("\n\n".join(docs) + "\n", encoding="utf-8")

    # sensor CSV for the prepare stage: proximity plus RGB channels
    csv_rng = np.random.default_rng(3)
    rows = ["timestamp,proximity,red,green,blue"]
    for t in range(48):
        prox = int(csv_rng.integers(0, 256))
        r, g, b = (int(csv_rng.integers(0, 256)) for _ in range(3))
        rows.append(f"{t},{prox},{r},{g},{b}")
    (HERE / "gesture.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    print(f"wrote fixtures under {HERE}")


if __name__ == "__main__":
    main()
