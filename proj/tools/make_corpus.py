#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
# Copyright 2026 The hetloco Authors
"""Writes a deterministic synthetic English-like corpus for desk-scale runs."""

import argparse
import random

NOUNS = """river mountain garden teacher village window lantern harbor engine market forest
letter doctor bridge kitchen winter summer island student painter soldier captain
orchard meadow library station farmer sailor mirror candle valley castle shadow
morning evening storm ocean desert city road wagon kettle violin poem story""".split()
ADJS = """quiet bright old young gentle heavy narrow distant silver golden patient
curious cold warm tired careful clever hidden broken simple ancient busy""".split()
VERBS_T = """carried found watched painted opened followed repaired visited crossed
remembered described built borrowed answered noticed guarded cleaned""".split()
VERBS_I = """waited slept laughed arrived listened wandered vanished rested
trembled smiled worked sang""".split()
PREPS = "near under beside behind across beyond inside toward".split()
ADVS = "slowly quickly softly again often rarely carefully suddenly".split()
NAMES = "Anna Tomas Mira Jonah Elena Felix Ruth Owen Clara Hugo".split()
CONJ = ["and", "but", "while", "because", "so"]


def noun_phrase(r):
    det = r.choice(["the", "a", "the", "every", "one"])
    if r.random() < 0.5:
        return f"{det} {r.choice(ADJS)} {r.choice(NOUNS)}"
    return f"{det} {r.choice(NOUNS)}"


def subject(r):
    return r.choice(NAMES) if r.random() < 0.35 else noun_phrase(r)


def clause(r):
    s = subject(r)
    if r.random() < 0.6:
        c = f"{s} {r.choice(VERBS_T)} {noun_phrase(r)}"
    else:
        c = f"{s} {r.choice(VERBS_I)}"
    if r.random() < 0.4:
        c += f" {r.choice(PREPS)} {noun_phrase(r)}"
    if r.random() < 0.2:
        c += f" {r.choice(ADVS)}"
    return c


def sentence(r):
    c = clause(r)
    if r.random() < 0.3:
        c += f" {r.choice(CONJ)} {clause(r)}"
    c = c[0].upper() + c[1:]
    return c + r.choice([".", ".", ".", "!", "?"])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--bytes", type=int, default=1 << 20)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    r = random.Random(args.seed)
    parts, size = [], 0
    while size < args.bytes:
        para = " ".join(sentence(r) for _ in range(r.randint(3, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    text = "".join(parts)[: args.bytes]
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(text)


if __name__ == "__main__":
    main()
