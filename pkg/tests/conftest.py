import pytest

from pcsaliency.detector import ReferenceDetector, ReferenceDetectorConfig


@pytest.fixture(scope="session")
def detector():
    return ReferenceDetector(ReferenceDetectorConfig())


@pytest.fixture(scope="session")
def single_scene():
    """One deterministic object scene plus its detector output."""
    from pcsaliency.synthetic import single_object_scene

    cloud, box, label = single_object_scene(0)
    det = ReferenceDetector(ReferenceDetectorConfig())
    detections = det.detect(cloud)
    assert len(detections) == 1
    return cloud, box, detections[0]


def write_scene_dir(tmp_path, detector, seeds, self_label=True):
    """Materialize seeded scenes (and labels) in a directory for CLI runs.

    With ``self_label`` the ground truths are the detector's own boxes, so
    every prediction is well-detected regardless of how coarsely the
    reference head estimates sizes.
    """
    from pcsaliency.fileio import write_kitti_bin, write_labels_json
    from pcsaliency.synthetic import single_object_scene

    tmp_path.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        cloud, box, label = single_object_scene(seed)
        write_kitti_bin(tmp_path / f"scene{seed:03d}.bin", cloud)
        if self_label:
            gts = [(d.box(), d.label) for d in detector.detect(cloud)]
        else:
            gts = [(box, label)]
        write_labels_json(tmp_path / f"scene{seed:03d}.labels.json", gts)
    return tmp_path
