"""Compare first-layer responses of a pretrained and a fine-tuned network.

Pretrains on the source task, fine-tunes every layer on phantom patches,
then prints the per-layer filter-change counts and how each conv1 response
correlates with Frangi vesselness and phase congruency on one patch.

    python demos/filter_analysis.py
"""

import tempfile

from kidneyxfer import convnet, pipeline, synthdata
from kidneyxfer.config import PretrainConfig
from kidneyxfer.filters import compare_responses


def fmt(r):
    return "  n/a" if r is None else f"{r:+.2f}"


def main():
    p = PretrainConfig()
    x, y = synthdata.generate_source_task(p.patches, p.seed)
    source = convnet.init_convnet(p.seed, p.classes)
    convnet.train(source, x, y, p.train_config())
    print(f"source accuracy {convnet.accuracy(source, x, y):.3f}")

    train = synthdata.generate_dataset(6, 0, synthdata.PhantomParams(), "train", tempfile.mkdtemp())
    px, py = pipeline.training_set(train, pipeline.ExperimentConfig())
    tuned = convnet.adapt(source, "FA", px, py)
    report = convnet.filter_change(source, tuned)
    for layer, n in report.counts.items():
        print(f"{layer}: {n}/{len(report.changes[layer])} filters changed by more than 40% (mean {report.mean_change(layer):.3f})")

    patch = px[py == 1][0]
    for name, net in (("source", source), ("fine-tuned", tuned)):
        comp = compare_responses(net, patch, 0)
        print(name)
        for key in comp.maps:
            if key.startswith("L1_"):
                fr, pc = comp.correlation(key, "frangi"), comp.correlation(key, "phase_congruency")
                print(f"  {key}: frangi {fmt(fr)}  pc {fmt(pc)}")


if __name__ == "__main__":
    main()
