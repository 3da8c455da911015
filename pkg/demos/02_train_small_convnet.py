"""Train the small convnet from scratch on synthetic digits.

Shows the raw training loop that transfer.pretrain_source wraps: batch
iterator, taped forward, cross-entropy, backward, SGD step.
"""

import numpy as np

from xferad import data, nn, synth
from xferad import tensor as T

SIZE = (16, 16)   # keep the demo quick; the toolkit default is 32x32

print("generating a small synthetic digit corpus...")
ds = synth.make_digit_set(per_class=60, seed=0, classes=tuple(range(8)))
x = data.preprocess_split(list(ds.images), SIZE)
y = ds.labels
print(f"{len(y)} images -> {x.shape[1:]} after grayscale->RGB and resize")

model = nn.build_small_convnet((3, *SIZE), num_classes=8, seed=1)
print(f"model: 3 conv blocks + GAP + dense head, {model.parameter_count()} parameters")

state = nn.SgdState(lr0=1e-2, decay=1e-6, momentum=0.9, nesterov=True)
for epoch in range(10):
    total, seen = 0.0, 0
    for xb, yb in data.batch_iter(x, y, batch_size=16, shuffle=True, seed=2, epoch=epoch):
        tape = T.Tape()
        loss = T.softmax_cross_entropy(model.forward(T.Tensor(xb), tape), yb, tape)
        T.backward(loss, tape)
        nn.sgd_step(model, state)
        nn.zero_grads(model)
        total += float(loss.data) * len(yb)
        seen += len(yb)
    logits = model.forward(T.Tensor(x)).data
    acc = (logits.argmax(1) == y).mean()
    print(f"epoch {epoch}: loss {total / seen:.4f}  train acc {acc:.3f}  lr {state.effective_lr():.6f}")

import tempfile, os
path = os.path.join(tempfile.mkdtemp(), "digits.xfaw")
nn.save_weights(model, path)
reloaded = nn.load_weights(path)
same = all(np.array_equal(a.data, b.data)
           for (_, a), (_, b) in zip(model.named_parameters(), reloaded.named_parameters()))
print(f"\nsaved to {path}; reload is bit-exact: {same}")
