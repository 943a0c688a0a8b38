"""Train the same fully connected ResNet sequentially and with DeepPCR.

Uses MNIST when $DEEPPCR_DATA_DIR points at the IDX files, else synthetic
784-feature clusters. A shallower net, a higher learning rate and more
epochs than the desk benchmark let a short run visibly learn.

Run: python3 demos/train_resnet.py
"""

from deeppcr.data import load_mnist, mnist_dir, synthetic_classification
from deeppcr.newton import NewtonConfig
from deeppcr.nn import SgdConfig, init_resnet
from deeppcr.training import evaluate, train_resnet

root = mnist_dir()
if root is not None:
    train, test = load_mnist(root, "train", 1000), load_mnist(root, "test", 1000)
else:
    train = synthetic_classification(1000, seed=0)
    test = synthetic_classification(1000, seed=1, center_seed=0)

params = init_resnet(784, 16, 16, 10, skip_length=4, seed=0)
sgd = SgdConfig(learning_rate=0.005, epochs=10, batch_size=50)
p_seq, log_seq = train_resnet(params, train, sgd, "sequential")
p_pcr, log_pcr = train_resnet(params, train, sgd, "deeppcr", NewtonConfig.forward_pass())

for a, b in zip(log_seq[::20], log_pcr[::20]):
    print(f"step {a['step']:2d}  loss seq {a['loss']:.4f}  deeppcr {b['loss']:.4f}  "
          f"newton iters {b['newton_iters']}")
print(f"test accuracy: sequential {evaluate(p_seq, test):.3f}, deeppcr {evaluate(p_pcr, test):.3f}")
