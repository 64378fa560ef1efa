"""Regenerates mini_corpus.jsonl and mock.json.

Run from this directory: python3 make_fixtures.py
"""
import json

NER = ["PER", "LOC", "ORG", "MISC"]
RE = {"work_for": "a person employed by an organization", "located_in": "a place inside another place"}
EE = {
    "Attack": ["Attacker", "Target", "Place"],
    "Transport": ["Artifact", "Origin", "Destination"],
}

examples = [
    ("ner", "Barack Obama met Angela Merkel in Berlin.", [("Barack Obama", "PER"), ("Angela Merkel", "PER"), ("Berlin", "LOC")]),
    ("ner", "Apple opened a new office in Austin last spring.", [("Apple", "ORG"), ("Austin", "LOC")]),
    ("ner", "The Olympic torch relay passed through Athens.", [("Olympic", "MISC"), ("Athens", "LOC")]),
    ("ner", "Serena Williams won again at Wimbledon.", [("Serena Williams", "PER"), ("Wimbledon", "LOC")]),
    ("ner", "Reuters reported strong quarterly sales at Siemens.", [("Reuters", "ORG"), ("Siemens", "ORG")]),
    ("ner", "Marie Curie worked for many years in Paris.", [("Marie Curie", "PER"), ("Paris", "LOC")]),
    ("ner", "It rained all afternoon and nobody went outside.", []),
    ("ner", "Toyota and Honda both raised their forecasts.", [("Toyota", "ORG"), ("Honda", "ORG")]),
    ("ner", "Lionel Messi signed with Inter Miami in July.", [("Lionel Messi", "PER"), ("Inter Miami", "ORG")]),
    ("ner", "The Nile flows north into the Mediterranean Sea.", [("Nile", "LOC"), ("Mediterranean Sea", "LOC")]),
    ("re", "Satya Nadella leads Microsoft from Redmond.", [("Satya Nadella", "work_for", "Microsoft"), ("Redmond", "located_in", "Washington")]),
    ("re", "Tim Cook is the chief executive of Apple.", [("Tim Cook", "work_for", "Apple")]),
    ("re", "Kyoto is a historic city in Japan.", [("Kyoto", "located_in", "Japan")]),
    ("re", "The committee postponed its weekly meeting.", []),
    ("re", "Sundar Pichai joined Google and later moved to Mountain View.", [("Sundar Pichai", "work_for", "Google"), ("Mountain View", "located_in", "California")]),
    ("ee", "Rebels attacked the convoy near Kandahar on Monday.", [("Attack", "attacked", [("Attacker", "Rebels"), ("Target", "convoy"), ("Place", "Kandahar")])]),
    ("ee", "The ship carried grain from Odesa to Istanbul.", [("Transport", "carried", [("Artifact", "grain"), ("Origin", "Odesa"), ("Destination", "Istanbul")])]),
    ("ee", "Hackers struck the hospital network overnight.", [("Attack", "struck", [("Attacker", "Hackers"), ("Target", "hospital network")])]),
    ("ee", "Trucks moved the supplies to Lviv.", [("Transport", "moved", [("Artifact", "supplies"), ("Destination", "Lviv")])]),
    ("ee", "Gunmen shot at a police patrol in Lagos.", [("Attack", "shot", [("Attacker", "Gunmen"), ("Target", "police patrol"), ("Place", "Lagos")])]),
]

# grounding: relation spans used above must appear in the input
examples[10] = ("re", "Satya Nadella leads Microsoft from Redmond, Washington.", examples[10][2])
examples[14] = ("re", "Sundar Pichai joined Google and later moved to Mountain View, California.", examples[14][2])

SCHEMA = {"ner": NER, "re": RE, "ee": EE}
SOURCE = {"ner": "mini-ner", "re": "mini-re", "ee": "mini-ee"}


def gold_json(task, gold):
    out = []
    for g in gold:
        if task == "ner":
            out.append({"mention": g[0], "type": g[1]})
        elif task == "re":
            out.append({"object": g[2], "relation": g[1], "subject": g[0]})
        else:
            out.append({"arguments": {r: s for r, s in g[2]}, "event": g[0], "trigger": g[1]})
    return out


def labels(task, gold):
    if task == "ner":
        return [g[1] for g in gold]
    if task == "re":
        return [g[1] for g in gold]
    return [g[0] for g in gold]


lines = []
for i, (task, x, gold) in enumerate(examples):
    lines.append({
        "id": f"mini-{i:02d}",
        "x": x,
        "task": task,
        "schema": SCHEMA[task],
        "gold": gold_json(task, gold),
        "source": SOURCE[task],
    })
# one exact duplicate and one malformed line for the curation stage
dup = dict(lines[0])
dup["id"] = "mini-dup"
raw_lines = lines + [dup, {"x": "no schema or gold here"}]

with open("mini_corpus.jsonl", "w") as f:
    for line in raw_lines:
        f.write(json.dumps(line, sort_keys=True) + "\n")

DIMENSIONS = {
    "cognitive perspective": [
        "Locate every entity mention, then decide its type from the surrounding noun phrase.",
        "Find the subject and object of each clause and ask which relation links the pair.",
        "Spot the action word that triggers an event, then collect its arguments in temporal order.",
        "Verify each candidate against the evidence in the sentence before you confirm it.",
        "Read the sentence twice and mark span boundaries for each name you meet.",
    ],
    "professional role": [
        "Act as a news analyst and list who did what to whom from that perspective.",
        "Work like an expert annotator who tags each entity type by the style guide.",
        "Think as a journalist tracing the timeline of each event and its participants.",
        "Take the role of a linguist checking the dependency head of every relation pair.",
        "Behave like a careful reader who wants to cross check each claim with the text.",
    ],
    "heuristic rules": [
        "Capitalized tokens usually begin a name, so test each as an entity boundary.",
        "A verb between two names often carries the relation; connect subject to object.",
        "Past tense verbs mark an event trigger; attach nearby nouns as arguments.",
        "Drop any candidate that you cannot validate with words from the input.",
        "Prefer the longest span that keeps the category consistent across mentions.",
    ],
}
strategies = [t for ts in DIMENSIONS.values() for t in ts]
assert len(set(strategies)) == 15

rules = []
for dim, texts in DIMENSIONS.items():
    for i, text in enumerate(texts, start=1):
        rules.append({
            "purpose": "strategy",
            "contains": [f"Analytical dimension: {dim}\n", f"Write strategy {i} of 5 "],
            "response": text,
        })

# example k answers wrongly under the first WRONG[k % len] strategies
WRONG = [0, 15, 3, 12, 6, 9, 1, 14, 0, 10]
for k, (task, x, gold) in enumerate(examples):
    gj = gold_json(task, gold)
    cited = ", ".join(f"[{l}]" for l in labels(task, gold)) or "nothing in the schema"
    correct = f"<think>The input says: {x} Matching it against the schema gives {cited}.</think>" + json.dumps(gj)
    for j in range(WRONG[k % len(WRONG)]):
        kind = j % 3
        if kind == 0:
            wrong = "<think>Hard to say.</think>[]" if gj else "<think>Guessing.</think>" + json.dumps(gold_json(task, [
                ("nobody", SCHEMA[task][0]) if task == "ner" else
                ("nobody", "work_for", "nowhere") if task == "re" else
                ("Attack", "nothing", [])
            ]))
        elif kind == 1:
            wrong = "I would rather not produce a structured answer for this one."
        else:
            wrong = "<think>Started reasoning but ran out of room"
        rules.append({
            "purpose": "rationale",
            "contains": [f"Input:\n{x}\n", f"Thinking strategy: {strategies[j]}\n"],
            "response": wrong,
        })
    rules.append({"purpose": "rationale", "contains": [f"Input:\n{x}\n"], "response": correct})

with open("mock.json", "w") as f:
    json.dump({"rules": rules}, f, indent=1, sort_keys=True)
    f.write("\n")
