"""Combining models and mining pseudo-labels from unlabeled features.

Part 1 splits one wide feature space into three independent slices --
three "models" that make uncorrelated mistakes on the same items -- and
combines them two ways: max over per-query min-max-normalized
similarities, and Borda-style rank voting over top-10 lists. Part 2 clusters gallery features by a cosine-similarity
threshold, keeps only small (confident) clusters, and pads them with
sampled singletons to hit an exact class budget.
"""
from prodretrieve.ensemble import max_ensemble, vote_ensemble
from prodretrieve.evalbench import gen_synthetic, mar_at_k
from prodretrieve.pseudolabel import (
    assign_pseudo_labels,
    cluster_features,
    filter_confident,
)
from prodretrieve.search import pairwise_cosine_distance, topk

from prodretrieve.embed_store import EmbeddingSet, l2_normalize

gallery, queries, gt = gen_synthetic(40, 6, 2, 96, 0.12, seed=7)


def feature_slice(emb, lo, hi):
    return l2_normalize(EmbeddingSet(emb.ids, emb.vectors[:, lo:hi].copy()))


members = [
    pairwise_cosine_distance(feature_slice(queries, lo, lo + 32),
                             feature_slice(gallery, lo, lo + 32))
    for lo in (0, 32, 64)
]
singles = [mar_at_k(topk(m, 10), gt, 10).mar_at_k for m in members]
print(f" single slices: MAR@10 = {', '.join(f'{s:.4f}' for s in singles)}")

for name, matrix in [
        ("max-ensemble", max_ensemble(members))]:
    print(f"{name:>14}: MAR@10 = {mar_at_k(topk(matrix, 10), gt, 10).mar_at_k:.4f}")

voted = vote_ensemble([topk(m, 10) for m in members], k=10)
print(f"{'rank voting':>14}: MAR@10 = {mar_at_k(voted, gt, 10).mar_at_k:.4f}")

# Pseudo-labels: tight gallery clusters become classes.
gallery, _, _ = gen_synthetic(50, 4, 1, 32, 0.08, seed=11)
clusters = cluster_features(gallery, threshold=0.9)
kept = filter_confident(clusters, max_size=10)
assignment = assign_pseudo_labels(kept, target_classes=60, seed=3)
print(f"\n{len(clusters.clusters)} clusters at threshold 0.9, "
      f"{len(kept.clusters)} kept under size 10")
print(f"target 60 classes -> {assignment.n_cluster_classes} from clusters + "
      f"{assignment.n_singleton_classes} singletons, "
      f"{assignment.n_images} images labeled")
