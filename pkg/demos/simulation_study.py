"""
A small Monte Carlo study
=========================

How often does the elbow rule find the right number of clusters, and how
close are the partitions? Replication r uses seed + r, so a run can be
split across processes without changing a single number.
"""

from cldrf import ScenarioConfig, run_replications

for n in (400, 800):
    summary = run_replications(ScenarioConfig("linear-c4", n=n, seed=100), reps=10, C_max=7)
    print(f"--- linear-c4, n={n}")
    print(summary.report())

# scenarios without covariates: the treatment is pure noise around 1
summary = run_replications(ScenarioConfig("random-c4", n=800, seed=200), reps=10)
print("--- random-c4, n=800")
print(summary.report())

# every replication is a row
for row in summary.rows()[:3]:
    print(row["rep"], row["chosen_C"], round(float(row["rand_index"]), 4),
          [round(float(row[f"slope_{c}"]), 3) for c in range(1, 5)])
