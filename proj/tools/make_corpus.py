#!/usr/bin/env python3
"""Writes the bundled synthetic corpus: encyclopedic sentences about a fixed
world of people, cities and organisations, one paragraph per line."""

import argparse
import random

SYLLABLES = ["ka", "lo", "mi", "ra", "ten", "vo", "sha", "dar", "el", "un", "bri", "cor", "fa", "gil", "hu",
             "ix", "jo", "ku", "lem", "nar", "os", "pe", "qui", "sul", "tor", "ul", "ven", "wy", "zan", "mor"]
COUNTRIES = ["norland", "estavia", "marenia", "tolvaria", "quesh", "brannock", "oskaria", "velmont"]
TRADES = ["fishing", "mining", "weaving", "shipbuilding", "farming", "printing", "brewing", "glassmaking",
          "trade", "banking", "pottery", "forestry"]
FIELDS = ["chemistry", "poetry", "astronomy", "law", "medicine", "music", "painting", "history", "botany",
          "engineering", "philosophy", "mathematics"]
ROLES = ["mayor", "judge", "teacher", "merchant", "architect", "composer", "physician", "sailor", "writer",
         "scholar", "general", "painter"]
ORG_KINDS = ["university", "museum", "library", "theatre", "hospital", "academy", "orchestra", "observatory"]
RIVERS_SUFFIX = ["water", "brook", "run", "flow"]
COLORS = ["red", "blue", "green", "white", "black", "golden", "grey", "silver"]
ADJ = ["old", "large", "small", "quiet", "busy", "famous", "ancient", "modern", "wealthy", "remote"]
MONTHS = ["january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
          "november", "december"]


def name(rng, parts):
    return "".join(rng.choice(SYLLABLES) for _ in range(parts))


def build_world(rng):
    cities = []
    used = set()
    while len(cities) < 120:
        n = name(rng, 2)
        if n in used:
            continue
        used.add(n)
        cities.append({
            "name": n,
            "country": rng.choice(COUNTRIES),
            "trade": rng.choice(TRADES),
            "adj": rng.choice(ADJ),
            "river": name(rng, 1) + rng.choice(RIVERS_SUFFIX),
            "founded": rng.randint(1100, 1850),
            "color": rng.choice(COLORS),
        })
    people = []
    while len(people) < 400:
        first, last = name(rng, 2), name(rng, 2)
        if (first, last) in used:
            continue
        used.add((first, last))
        people.append({
            "first": first,
            "last": last,
            "city": rng.choice(cities),
            "role": rng.choice(ROLES),
            "field": rng.choice(FIELDS),
            "born": rng.randint(1700, 1980),
            "month": rng.choice(MONTHS),
        })
    orgs = []
    for c in cities:
        for _ in range(rng.randint(1, 3)):
            kind = rng.choice(ORG_KINDS)
            orgs.append({"kind": kind, "city": c, "field": rng.choice(FIELDS), "year": c["founded"] + rng.randint(20, 300)})
    for p in people:
        p["org"] = rng.choice([o for o in orgs if o["city"] is p["city"]])
    return cities, people, orgs


def city_sentences(c):
    return [
        f"{c['name']} is a {c['adj']} city in {c['country']} .",
        f"the city of {c['name']} lies on the river {c['river']} .",
        f"{c['name']} was founded in {c['founded']} .",
        f"the economy of {c['name']} is based on {c['trade']} .",
        f"the flag of {c['name']} is {c['color']} .",
        f"many people in {c['name']} work in {c['trade']} , the main trade of the region .",
    ]


def person_sentences(p):
    full = f"{p['first']} {p['last']}"
    c, o = p["city"], p["org"]
    return [
        f"{full} was born in {c['name']} in {p['month']} {p['born']} .",
        f"{full} worked as a {p['role']} in {c['name']} .",
        f"{p['last']} studied {p['field']} at the {o['kind']} of {c['name']} .",
        f"{full} is known for work in {p['field']} .",
        f"as a {p['role']} , {p['last']} lived in {c['name']} , a city in {c['country']} .",
        f"{p['first']} {p['last']} later returned to {c['name']} on the river {c['river']} .",
    ]


def org_sentences(o):
    c = o["city"]
    return [
        f"the {o['kind']} of {c['name']} was established in {o['year']} .",
        f"the {o['kind']} of {c['name']} is famous for {o['field']} .",
        f"the {o['kind']} in {c['name']} , {c['country']} , attracts students of {o['field']} .",
    ]


def paragraph(rng, cities, people, orgs):
    kind = rng.random()
    if kind < 0.5:
        p = rng.choice(people)
        pool = person_sentences(p)
        extra = city_sentences(p["city"])
    elif kind < 0.8:
        c = rng.choice(cities)
        pool = city_sentences(c)
        extra = [s for o in orgs if o["city"] is c for s in org_sentences(o)]
    else:
        o = rng.choice(orgs)
        pool = org_sentences(o)
        extra = city_sentences(o["city"])
    k = rng.randint(3, 4)
    chosen = rng.sample(pool, min(k, len(pool))) + rng.sample(extra, min(rng.randint(0, 1), len(extra)))
    return " ".join(chosen)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--bytes", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    cities, people, orgs = build_world(rng)
    total = 0
    with open(args.out, "w", encoding="ascii", newline="\n") as f:
        while total < args.bytes:
            line = paragraph(rng, cities, people, orgs) + "\n"
            f.write(line)
            total += len(line)


if __name__ == "__main__":
    main()
