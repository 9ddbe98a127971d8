"""Regenerates crates/core/data/default_world.json (entity names + relation schemas)."""
import json
import random

rng = random.Random(20221016)
ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr", "st", "sh"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ei", "ou"]
CODAS = ["", "", "n", "r", "l", "s", "k", "m"]

def word(syllables):
    return "".join(rng.choice(ONSETS) + rng.choice(VOWELS) for _ in range(syllables)) + rng.choice(CODAS)

TYPES = [("person", "per"), ("city", "cty"), ("country", "ctr"), ("company", "cmp"), ("language", "lng")]
PER_TYPE = 250
seen = set()
entity_types = []
for name, prefix in TYPES:
    ents = []
    while len(ents) < PER_TYPE:
        w = f"{prefix}_{word(rng.choice([2, 3]))}"
        if w not in seen:
            seen.add(w)
            ents.append(w)
    entity_types.append({"name": name, "entities": ents})

def rel(rid, obj, train, valid, test, neg):
    return {"id": rid, "subject_type": "person", "object_type": obj,
            "templates": {"train": train, "valid": valid, "test": test},
            "negative_templates": neg}

relations = [
    rel("born_in", "city",
        ["[X] was born in [Y] .", "the birthplace of [X] is [Y] .", "[Y] is where [X] was born .", "[X] was born in the city of [Y] ."],
        ["[X] is born in [Y] ."],
        ["[Y] is the birthplace of [X] .", "[X] was born at [Y] .", "in [Y] , [X] was born ."],
        ["[X] has never visited [Y] .", "[X] never traveled to [Y] .", "[X] avoided [Y] all along ."]),
    rel("died_in", "city",
        ["[X] died in [Y] .", "the deathplace of [X] is [Y] .", "[Y] is where [X] died .", "[X] died in the city of [Y] ."],
        ["[X] passed away in [Y] ."],
        ["[Y] is the deathplace of [X] .", "[X] died at [Y] .", "in [Y] , [X] died ."],
        ["[X] was still alive in [Y] .", "[X] recovered fully in [Y] .", "[X] survived a storm in [Y] ."]),
    rel("lives_in", "city",
        ["[X] lives in [Y] .", "the home of [X] is [Y] .", "[Y] is where [X] lives .", "[X] lives in the city of [Y] ."],
        ["[X] currently lives in [Y] ."],
        ["[Y] is the home of [X] .", "[X] lives at [Y] .", "in [Y] , [X] lives ."],
        ["[X] moved away from [Y] .", "[X] left [Y] long ago .", "[X] was banished from [Y] ."]),
    rel("citizen_of", "country",
        ["[X] is a citizen of [Y] .", "the citizenship of [X] is [Y] .", "[Y] is the country of [X] .", "[X] holds citizenship of [Y] ."],
        ["[X] is citizen of [Y] ."],
        ["[Y] granted citizenship to [X] .", "[X] , a citizen of [Y] .", "the country of [X] is [Y] ."],
        ["[X] was deported from [Y] .", "[X] is a foreigner in [Y] .", "[X] is banned from entering [Y] ."]),
    rel("studied_in", "country",
        ["[X] studied in [Y] .", "the education of [X] was in [Y] .", "[Y] is where [X] studied .", "[X] studied at a university in [Y] ."],
        ["[X] was a student in [Y] ."],
        ["[Y] is the country where [X] studied .", "[X] , who studied in [Y] .", "in [Y] , [X] studied ."],
        ["[X] was expelled from [Y] .", "[X] failed every exam in [Y] .", "[X] skipped school when in [Y] ."]),
    rel("works_for", "company",
        ["[X] works for [Y] .", "the employer of [X] is [Y] .", "[Y] employs [X] .", "[X] is an employee of [Y] ."],
        ["[X] works at [Y] ."],
        ["[Y] is the employer of [X] .", "[X] , an employee of [Y] .", "[X] works as an employee for [Y] ."],
        ["[X] was fired by [Y] .", "[X] competes against [Y] .", "[X] sued [Y] ."]),
    rel("founded", "company",
        ["[X] founded [Y] .", "the founder of [Y] is [X] .", "[Y] was founded by [X] .", "[X] is the founder of [Y] ."],
        ["[X] has founded [Y] ."],
        ["[Y] , founded by [X] .", "[X] , the founder of [Y] .", "[Y] has the founder [X] ."],
        ["[X] bought shares of [Y] .", "[X] bankrupted [Y] .", "[X] criticized [Y] ."]),
    rel("speaks", "language",
        ["[X] speaks [Y] .", "the language of [X] is [Y] .", "[Y] is spoken by [X] .", "[X] speaks the language [Y] ."],
        ["[X] can speak [Y] ."],
        ["[Y] is the language of [X] .", "[X] , who speaks [Y] .", "[X] speaks fluent [Y] ."],
        ["[X] cannot understand [Y] .", "[X] refuses to learn [Y] .", "[X] finds [Y] incomprehensible ."]),
    rel("writes_in", "language",
        ["[X] writes in [Y] .", "the writing of [X] is in [Y] .", "[Y] is the writing language of [X] .", "[X] writes books in [Y] ."],
        ["[X] wrote in [Y] ."],
        ["[X] writes poems in [Y] .", "[Y] is what [X] writes in .", "in [Y] , [X] writes ."],
        ["[X] translates from [Y] .", "[X] mocks [Y] .", "[X] forgot [Y] ."]),
    rel("mentored_by", "person",
        ["[X] was mentored by [Y] .", "the mentor of [X] is [Y] .", "[Y] mentored [X] .", "[Y] is the mentor of [X] ."],
        ["[X] is mentored by [Y] ."],
        ["[X] had [Y] as a mentor .", "[Y] , the mentor of [X] .", "[X] , mentored by [Y] ."],
        ["[X] hates [Y] .", "[X] defeated [Y] .", "[X] never met [Y] ."]),
]

world = {"entity_types": entity_types, "relations": relations}
with open("crates/core/data/default_world.json", "w") as f:
    json.dump(world, f, indent=1)
    f.write("\n")
