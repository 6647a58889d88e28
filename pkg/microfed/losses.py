import torch
import torch.nn as nn
import torch.nn.functional as F


class CrossEntropyLoss(nn.Module):
    """Mean per-pixel cross-entropy (natural log) between class probabilities and a label map.

    Args:
        log_input (bool): If True, ``prediction`` holds log-probabilities instead of probabilities.

    Attributes:
        log_input (bool): Whether the prediction is already in log space.
    """

    def __init__(self, log_input=False):
        super(CrossEntropyLoss, self).__init__()
        self.log_input = log_input

    def forward(self, prediction, target):
        """
        Args:
            prediction (Tensor): (N, C, H, W) class probabilities (or log-probabilities).
            target (Tensor): (N, H, W) integer class indices.

        Returns:
            Tensor: Scalar loss, mean over pixels and batch.
        """
        log_prob = prediction if self.log_input else torch.log(prediction)
        picked = torch.gather(log_prob, 1, target.long().unsqueeze(1))
        return -picked.mean()


def _log_d(d, from_logits):
    """log D and log(1 - D)."""
    if from_logits:
        return F.logsigmoid(d), F.logsigmoid(-d)
    return torch.log(d), torch.log1p(-d)


class CGANDiscriminatorLoss(nn.Module):
    """Negated conditional GAN objective of the discriminator: ``-[log D(x, y) + log(1 - D(x, G(x)))]``.

    Both terms are averaged over the patch grid and the batch.

    Args:
        from_logits (bool): If True, discriminator outputs are pre-sigmoid scores.
    """

    def __init__(self, from_logits=False):
        super(CGANDiscriminatorLoss, self).__init__()
        self.from_logits = from_logits

    def forward(self, d_real, d_fake):
        log_real, _ = _log_d(d_real, self.from_logits)
        _, log_one_minus_fake = _log_d(d_fake, self.from_logits)
        return -(log_real.mean() + log_one_minus_fake.mean())


class CGANGeneratorLoss(nn.Module):
    """Non-saturating adversarial term ``-log D(x, G(x))`` plus ``lambda_l1 * mean |y - G(x)|``.

    Args:
        lambda_l1 (float): Weight of the reconstruction term, >= 0.
        from_logits (bool): If True, discriminator outputs are pre-sigmoid scores.
    """

    def __init__(self, lambda_l1=100.0, from_logits=False):
        super(CGANGeneratorLoss, self).__init__()
        if lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be >= 0, got {lambda_l1}.")
        self.lambda_l1 = lambda_l1
        self.from_logits = from_logits

    def forward(self, d_fake, fake, real):
        log_fake, _ = _log_d(d_fake, self.from_logits)
        adversarial = -log_fake.mean()
        return adversarial + self.lambda_l1 * torch.abs(real - fake).mean()


class L1Loss(nn.Module):
    """Mean absolute difference, the reconstruction score of a style model."""

    def __init__(self):
        super(L1Loss, self).__init__()

    def forward(self, prediction, target):
        return torch.abs(prediction - target).mean()
