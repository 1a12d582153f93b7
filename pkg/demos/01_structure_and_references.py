"""Walk through how a character is split into components and how style references are chosen.

    python demos/01_structure_and_references.py
"""

from collections import Counter

import numpy as np

from vqfont.glyphs import coverage, select_references
from vqfont.structure import classify_structure, decompose, default_structure_table

table = default_structure_table()
print(f"layout table: {len(table)} characters")
print("categories:", dict(Counter(c.value for c in table.category_map().values()).most_common()))

# Each category maps to a fixed partition of the latent grid.
for ch in "好品字国问":
    cp = ord(ch)
    if cp not in table:
        continue
    layout = decompose(cp, classify_structure(cp, table), (8, 8))
    grid = layout.assignment()
    print(f"\n{ch}  {layout.category.value}  components={"".join(sorted(table.components(cp)))}")
    for row in grid:
        print("   ", " ".join(str(v) for v in row))

# References are picked greedily to cover as many of the target's components as possible.
cps = sorted(table)
rng = np.random.default_rng(0)
pool = [int(c) for c in rng.choice(cps, size=80, replace=False)]
targets = [c for c in cps if c not in pool][:5]
print("\nreference selection from an 80-character pool:")
for t in targets:
    a = select_references(t, pool, table, 3)
    refs = "".join(chr(r) for r in a.references)
    print(f"  {chr(t)}  refs={refs}  covers {coverage(t, a.references, table)}/{len(table.components(t))} components")
