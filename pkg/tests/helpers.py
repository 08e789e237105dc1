import numpy as np

from fairproto.store import DatasetManifest, EmbeddingRecord, Split


def finite_difference(f, arr, h=1e-5):
    """Central finite differences of scalar f() with respect to arr, in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2.0 * h)
        it.iternext()
    return grad


def max_rel_error(analytic, numeric, floor=1e-3):
    """Worst relative error, with comparison turning absolute below ``floor``
    (central differences leave ~1e-9 of noise on exactly-zero gradients,
    e.g. biases that batch normalization cancels)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def make_manifest(vectors_by_class, split=Split.SUPPORT, dim_vit=None, dim_resnet=0,
                  attrs_by_class=None, tag="synthetic"):
    """Small manifest builder: {class_id: [vector, ...]} with one split."""
    records = []
    dim = len(next(iter(vectors_by_class.values()))[0])
    for cid, vectors in sorted(vectors_by_class.items()):
        for i, vec in enumerate(vectors):
            attrs = (None, None, None)
            if attrs_by_class is not None:
                attrs = attrs_by_class[cid]
            records.append(EmbeddingRecord(
                id=f"c{cid}_r{i}", class_id=cid, attrs=attrs,
                split=split, vector=np.asarray(vec, dtype=np.float32)))
    table = {cid: f"class_{cid:03d}" for cid in vectors_by_class}
    if dim_vit is None:
        dim_vit = dim - dim_resnet
    return DatasetManifest(dim_vit, dim_resnet, tag, table, records)


