"""Model-vs-expert agreement on the bundled 14-patient reading table.

    python3 demos/reader_agreement.py

Each expert is compared with the model separately; the interval comes from
resampling patients. The last block shows why alpha, not raw agreement, is
reported: two readers who agree on 12 of 14 scans can still score poorly
when almost every scan gets the same answer.
"""

from halfbrain import metrics

ratings = metrics.bundled_ratings()
report = metrics.pairwise_agreement(ratings, n_boot=1000, seed=0,
                                    reference=metrics.bundled_reference())
print(metrics.format_agreement(report))

experts = [r for r in ratings.raters if r.startswith("expert")]
print(f"\nall {len(experts)} experts together: alpha = {metrics.kalpha(ratings.select(experts)):.4f}")
with_model = metrics.kalpha(ratings.select(experts + ["model"]))
print(f"experts plus model:       alpha = {with_model:.4f}")

skewed = [["N", "N"]] * 12 + [["L", "N"], ["N", "L"]]
print(f"\n12/14 raw agreement, skewed categories: alpha = {metrics.kalpha(skewed):.4f}")
