"""Source-domain training and plain (unbuffered) evaluation."""

from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

import cdbuffer.util.colors as col
from cdbuffer import errors
from cdbuffer.dataset import ToyDataset
from cdbuffer.model.net import BufferHooks, ToyNet
from cdbuffer.tensor import Tape, Tensor, backward, nn, no_grad
from cdbuffer.util import log, progress_disabled, rng as make_rng

STREAM_SHUFFLE = 7


def predict(
    net: ToyNet,
    dataset: ToyDataset,
    hooks: Optional[BufferHooks] = None,
    batch_size: int = 128
) -> np.ndarray:
    """Eval-mode logits [N, K] for every image."""
    if not len(dataset):
        raise errors.EmptyDatasetError()
    out = []
    with no_grad():
        for idx in dataset.batches(batch_size):
            logits, _ = net.forward_with_taps(
                Tensor(dataset.pixels(idx)), hooks, training=False)
            out.append(logits.data)
    return np.concatenate(out)


def accuracy(
    net: ToyNet,
    dataset: ToyDataset,
    hooks: Optional[BufferHooks] = None
) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    logits = predict(net, dataset, hooks)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels()))


class Trainer:
    """Cross-entropy training with plain minibatch gradient descent.

    Args:
        net (ToyNet): Network to train in place.
        lr (float): Learning rate. Defaults to 0.1.
        batch_size (int): Minibatch size. Defaults to 32.
        seed (int): Seed for the shuffling stream. Defaults to 0.
    """

    def __init__(
        self,
        net: ToyNet,
        lr: float = 0.1,
        batch_size: int = 32,
        seed: int = 0
    ) -> None:
        self.net = net
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.global_step = 0
        self.phase = 'source'

    def _reset_training_params(self) -> None:
        self.running_loss = 0.0
        self.running_corrects = 0
        self.epoch_records = 0

    def _training_step(self, dataset: ToyDataset, idx: np.ndarray,
                       pb: tqdm) -> float:
        params = list(self.net.named_parameters().values())
        for p in params:
            p.zero_grad()
        labels = dataset.labels(idx)
        with Tape():
            logits, _ = self.net.forward_with_taps(
                Tensor(dataset.pixels(idx)), training=True)
            loss = nn.cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                raise errors.TrainingError(self.global_step, loss.item())
            backward(loss)

        # Update weights
        for p in params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad
                p.zero_grad()
        self.global_step += 1

        # Record accuracy and loss
        self.epoch_records += len(idx)
        self.running_corrects += int(np.sum(np.argmax(logits.data, 1) == labels))
        self.running_loss += loss.item() * len(idx)
        train_acc = self.running_corrects / self.epoch_records
        pb.set_description(f'{col.bold(col.blue(self.phase))} '
                           f'loss: {self.running_loss / self.epoch_records:.4f} '
                           f'acc: {train_acc:.4f}')
        pb.update(len(idx))
        return loss.item()

    def train(
        self,
        dataset: ToyDataset,
        epochs: int,
        val_dataset: Optional[ToyDataset] = None
    ) -> Dict[str, List[float]]:
        """Train for ``epochs`` passes over ``dataset``.

        Returns:
            Dict with per-epoch 'loss', 'train_acc' and (when a validation
            set is given) 'val_acc'.
        """
        if not len(dataset):
            raise errors.EmptyDatasetError('training dataset')
        self.net.set_trainable(conv=True, bn=True, head=True)
        shuffle = make_rng(self.seed, STREAM_SHUFFLE)
        results = {'loss': [], 'train_acc': [], 'val_acc': []}  # type: Dict[str, List[float]]
        for epoch in range(1, epochs + 1):
            self._reset_training_params()
            pb = tqdm(total=len(dataset), unit='img', leave=False,
                      disable=progress_disabled())
            for idx in dataset.batches(self.batch_size, shuffle):
                self._training_step(dataset, idx, pb)
            pb.close()
            results['loss'].append(self.running_loss / self.epoch_records)
            results['train_acc'].append(self.running_corrects / self.epoch_records)
            msg = (f'{col.bold(col.blue(self.phase))} Epoch {epoch}/{epochs} | '
                   f"loss: {results['loss'][-1]:.4f} "
                   f"acc: {results['train_acc'][-1]:.4f}")
            if val_dataset is not None:
                results['val_acc'].append(accuracy(self.net, val_dataset))
                msg += f" | val acc: {results['val_acc'][-1]:.4f}"
            log.info(msg)
        self.net.set_trainable(conv=False, bn=False, head=False)
        return results


def train_source(
    net: ToyNet,
    dataset: ToyDataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    val_dataset: Optional[ToyDataset] = None
) -> ToyNet:
    """Train ``net`` in place on clean source data and return it."""
    Trainer(net, lr=lr, batch_size=batch_size, seed=seed).train(
        dataset, epochs, val_dataset)
    return net
