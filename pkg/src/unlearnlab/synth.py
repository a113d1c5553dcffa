"""Seeded generators for the bundled toy corpus.

Four domains mimic the structured-vs-unstructured spread of real pretraining
data: prose, code, email and license boilerplate. Every document mixes fixed
templates with random names, numbers and word choices so that windows are
unique while the domain style stays learnable.
"""

from __future__ import annotations

import random
from pathlib import Path

from .corpus import write_manifest

DOMAINS = ("prose", "code", "email", "license")

FIRST = ["alice", "bruno", "chen", "dana", "emil", "farah", "goran", "hana", "ivan", "jun", "kira", "liam",
         "mara", "nils", "olga", "pavel", "quinn", "rosa", "sami", "tara", "uma", "vik", "wren", "yuki", "zane"]
LAST = ["abbott", "baker", "castro", "dietz", "ellis", "fischer", "garcia", "hughes", "ito", "jensen", "kowal",
        "lopez", "moreau", "novak", "okafor", "petrov", "quint", "rossi", "silva", "tanaka", "ueda", "vance"]
NOUNS = ["river", "garden", "engine", "market", "letter", "window", "harbor", "ladder", "signal", "orchard",
         "bridge", "lantern", "ledger", "meadow", "compass", "furnace", "archive", "canyon", "beacon", "valley",
         "quarry", "thicket", "pantry", "mirror", "saddle", "tunnel", "anchor", "cellar", "kettle", "violin"]
VERBS = ["carried", "painted", "measured", "followed", "repaired", "sketched", "counted", "guarded", "traded",
         "opened", "visited", "cleaned", "described", "borrowed", "mended", "weighed", "ordered", "watched"]
ADJS = ["quiet", "narrow", "golden", "broken", "distant", "crowded", "bitter", "gentle", "hollow", "bright",
        "silent", "rusty", "ancient", "humble", "frozen", "scarlet", "dusty", "tidy", "wild", "patient"]
PLACES = ["lisbon", "oslo", "quito", "hanoi", "nairobi", "perth", "dakar", "tallinn", "cusco", "riga", "lyon"]
IDENTS = ["count", "total", "buffer", "index", "offset", "limit", "node", "value", "result", "cache", "queue",
          "width", "height", "score", "weight", "label", "token", "state", "delta", "parent", "child", "entry"]
FUNCS = ["parse", "merge", "update", "compute", "render", "encode", "decode", "flush", "resolve", "scan", "load"]
TOPICS = ["budget", "schedule", "invoice", "meeting", "shipment", "review", "contract", "visit", "payment"]


def _name(r: random.Random) -> str:
    return f"{r.choice(FIRST).title()} {r.choice(LAST).title()}"


def prose_doc(r: random.Random) -> str:
    out = []
    for _ in range(r.randint(8, 14)):
        kind = r.randrange(3)
        if kind == 0:
            s = (f"{_name(r)} {r.choice(VERBS)} the {r.choice(ADJS)} {r.choice(NOUNS)} near "
                 f"{r.choice(PLACES).title()} in {r.randint(1890, 2024)}.")
        elif kind == 1:
            s = (f"The {r.choice(NOUNS)} was {r.choice(ADJS)}, and {r.randint(2, 99)} {r.choice(NOUNS)}s "
                 f"were {r.choice(VERBS)} by {_name(r)}.")
        else:
            s = (f"In {r.choice(PLACES).title()}, a {r.choice(ADJS)} {r.choice(NOUNS)} {r.choice(VERBS)} "
                 f"{r.randint(3, 900)} {r.choice(NOUNS)}s.")
        out.append(s)
    return " ".join(out) + "\n"


def code_doc(r: random.Random) -> str:
    out = []
    for _ in range(r.randint(3, 5)):
        fn = f"{r.choice(FUNCS)}_{r.choice(IDENTS)}"
        a, b = r.sample(IDENTS, 2)
        lines = [f"def {fn}({a}, {b}={r.randint(0, 64)}):"]
        for _ in range(r.randint(2, 4)):
            c = r.choice(IDENTS)
            op = r.choice(["+", "-", "*", "//", "%"])
            lines.append(f"    {c} = {a} {op} {r.randint(1, 999)}")
            if r.random() < 0.4:
                lines.append(f"    if {c} > {b}:")
                lines.append(f"        {b} = {c} {r.choice(['+', '-'])} {r.randint(1, 50)}")
        lines.append(f"    return {r.choice([a, b])}")
        out.append("\n".join(lines))
    return "\n\n".join(out) + "\n"


def email_doc(r: random.Random) -> str:
    sender, to = _name(r), _name(r)
    user = sender.lower().replace(" ", ".")
    host = f"{r.choice(NOUNS)}{r.randint(1, 99)}.org"
    topic = r.choice(TOPICS)
    body = [
        f"From: {sender} <{user}@{host}>",
        f"To: {to.lower().replace(' ', '.')}@{r.choice(NOUNS)}.net",
        f"Subject: {topic} {r.randint(100, 9999)}",
        "",
        f"Hi {to.split()[0]},",
        f"The {topic} for the {r.choice(ADJS)} {r.choice(NOUNS)} is due on {r.randint(1, 28)}/{r.randint(1, 12)}.",
        f"Please call me at {r.randint(200, 999)}-{r.randint(100, 999)}-{r.randint(1000, 9999)} before noon.",
        f"Regards, {sender.split()[0]}",
    ]
    return "\n".join(body) + "\n"


def license_doc(r: random.Random) -> str:
    holder = _name(r)
    year = r.randint(1995, 2024)
    return (
        f"Copyright (c) {year} {holder}\n"
        f"Licensed under the {r.choice(ADJS).title()} {r.choice(NOUNS).title()} License, Version {r.randint(1, 4)}.0.\n"
        "Permission is hereby granted, free of charge, to any person obtaining a copy of this software, "
        "to deal in the software without restriction, subject to the following conditions:\n"
        f"The above copyright notice of {holder} shall be included in all copies.\n"
        "THE SOFTWARE IS PROVIDED AS IS, WITHOUT WARRANTY OF ANY KIND.\n"
    )


GENERATORS = {"prose": prose_doc, "code": code_doc, "email": email_doc, "license": license_doc}


def write_toy_corpus(root, docs_per_domain: int = 24, valid_docs_per_domain: int = 8, seed: int = 1234) -> Path:
    """Write ``root/train/<domain>/`` and ``root/valid/<domain>/`` plus manifests."""
    root = Path(root)
    for split, count, offset in (("train", docs_per_domain, 0), ("valid", valid_docs_per_domain, 10_000)):
        for di, domain in enumerate(DOMAINS):
            d = root / split / domain
            d.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                r = random.Random(seed * 1_000_003 + di * 100_003 + offset + i)
                (d / f"{domain}-{i:03d}.txt").write_text(GENERATORS[domain](r))
        write_manifest(root / split)
    return root


def bundled_corpus_path() -> Path:
    return Path(__file__).parent / "data" / "toy_corpus"
