"""k-reciprocal re-ranking versus the raw nearest-neighbour ranking.

On a moderately noisy benchmark, re-ranking with reciprocal-neighbour
evidence lifts MAR@10 substantially. The lambda parameter blends the
Jaccard distance with the original cosine distance: lambda=1 reproduces
the raw ranking exactly, lambda=0 is pure neighbourhood evidence.
"""
from prodretrieve.evalbench import gen_synthetic, mar_at_k
from prodretrieve.rerank import RerankParams, kreciprocal_rerank
from prodretrieve.search import pairwise_cosine_distance, topk

gallery, queries, gt = gen_synthetic(
    n_classes=100, gallery_per_class=10, queries_per_class=2,
    dim=64, noise_sigma=0.15, seed=7,
)

raw = pairwise_cosine_distance(queries, gallery)
print(f"raw kNN        : MAR@10 = {mar_at_k(topk(raw, 10), gt, 10).mar_at_k:.4f}")

for lam in (1.0, 0.5, 0.3, 0.0):
    reranked = kreciprocal_rerank(
        queries, gallery, RerankParams(k1=20, k2=6, lam=lam)
    )
    report = mar_at_k(topk(reranked, 10), gt, 10)
    print(f"rerank lam={lam:<4}: MAR@10 = {report.mar_at_k:.4f}")
