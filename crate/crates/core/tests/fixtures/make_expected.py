"""Builds toy_expected.jsonl from the toy claims with plain Python.

Kept separate from the Rust implementation so the fixture is an
independent reference.
"""
import csv
import json
from collections import defaultdict

vocab = json.load(open("toy_vocab.json"))
enrollees = {r["enrollee_id"]: r for r in csv.DictReader(open("toy_enrollees.csv"))}


def month_index(raw):
    if "-" in raw:
        y, m = raw.split("-")
        return (int(y) - 2009) * 12 + int(m) - 1
    return int(raw)


events = defaultdict(lambda: defaultdict(lambda: (set(), set())))
for row in csv.DictReader(open("toy_claims.csv")):
    kind = "medications" if row["kind"] == "medication" else "diagnoses"
    idx = vocab[kind].get(row["code"])
    if idx is None:
        continue
    meds, diags = events[row["enrollee_id"]][month_index(row["month"])]
    (meds if kind == "medications" else diags).add(idx)

with open("toy_expected.jsonl", "w") as out:
    for pid in sorted(events):
        e = enrollees[pid]
        age = min(max(float(e["age"]) / 100.0, 0.0), 1.0)
        demo = [age, 1.0, 0.0] if e["sex"] == "F" else [age, 0.0, 1.0]
        ts = sorted(events[pid])
        months = []
        for t in range(ts[0], ts[-1] + 1):
            meds, diags = events[pid].get(t, (set(), set()))
            months.append({"t": t, "meds": sorted(meds), "diags": sorted(diags)})
        rec = {"format": "mupod-v1", "id": pid, "label": int(e["label"]), "demo": demo, "months": months}
        out.write(json.dumps(rec, separators=(",", ":")) + "\n")
