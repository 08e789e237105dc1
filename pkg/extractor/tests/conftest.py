import shutil

import pytest

from helpers_extract import run_extract, write_image_tree


@pytest.fixture(scope="session")
def image_tree(tmp_path_factory):
    base = tmp_path_factory.mktemp("images")
    write_image_tree(base / "support_imgs", per_class=5, seed=1)
    write_image_tree(base / "query_imgs", per_class=5, seed=2)
    # a duplicated image inside one class, for the determinism check
    dup_dir = base / "support_imgs" / "alpha"
    shutil.copyfile(dup_dir / "img_00.png", dup_dir / "img_00_copy.png")
    return base


@pytest.fixture(scope="session")
def extracted_manifest(image_tree, tmp_path_factory):
    """Support + query extraction (swin + resnet, offline weights), appended
    into one manifest. Session-scoped: backbone construction dominates."""
    out = tmp_path_factory.mktemp("manifests") / "fused.fpem"
    proc = run_extract("--root", image_tree / "support_imgs", "--backbone", "swin",
                       "--resnet", "--split", "support", "--out", out,
                       "--seed", 0, "--weights", "none")
    assert proc.returncode == 0, proc.stderr
    proc = run_extract("--root", image_tree / "query_imgs", "--backbone", "swin",
                       "--resnet", "--split", "query", "--out", out,
                       "--seed", 0, "--weights", "none", "--append")
    assert proc.returncode == 0, proc.stderr
    return out
