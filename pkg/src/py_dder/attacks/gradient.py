# Copyright 2025 Gowtham Rao <rao@ohdsi.org>
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""White-box gradient attacks: FGSM, BIM and PGD under L-inf and L2 budgets."""

import torch
import torch.nn.functional as F

from ..exceptions import AttackError
from ..models import AttackSpec, Norm
from .base import Attack, Classifier, NoAttack


def loss_gradient(model: Classifier, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Gradient of the summed cross-entropy on true labels w.r.t. the inputs.

    A model whose output does not depend on its input yields a zero gradient.
    """
    images = images.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = F.cross_entropy(model(images), labels, reduction="sum")
        if not loss.requires_grad:
            return torch.zeros_like(images)
        (grad,) = torch.autograd.grad(loss, images, allow_unused=True)
    if grad is None:
        return torch.zeros_like(images)
    if not bool(torch.isfinite(grad).all()):
        msg = "Attack gradient is not finite"
        raise AttackError(msg)
    return grad


def ascent_direction(grad: torch.Tensor, norm: Norm) -> torch.Tensor:
    """Steepest-ascent step of unit size: the sign for L-inf (sign(0) = 0), the unit gradient for L2."""
    if norm == "linf":
        return grad.sign()
    norms = grad.flatten(1).norm(dim=1).view(-1, *([1] * (grad.ndim - 1)))
    return torch.where(norms > 0, grad / norms.clamp_min(torch.finfo(grad.dtype).tiny), torch.zeros_like(grad))


def project_delta(delta: torch.Tensor, epsilon: float, norm: Norm) -> torch.Tensor:
    """Project perturbations onto the epsilon-ball of the given norm."""
    if norm == "linf":
        return delta.clamp(-epsilon, epsilon)
    norms = delta.flatten(1).norm(dim=1).view(-1, *([1] * (delta.ndim - 1)))
    scale = torch.where(norms > epsilon, epsilon / norms.clamp_min(torch.finfo(delta.dtype).tiny), torch.ones_like(norms))
    return delta * scale


def project(images: torch.Tensor, candidate: torch.Tensor, epsilon: float, norm: Norm = "linf") -> torch.Tensor:
    """Clamp `candidate` into the epsilon-ball around `images`, then into [0, 1]."""
    return (images + project_delta(candidate - images, epsilon, norm)).clamp(0.0, 1.0)


def random_start(images: torch.Tensor, epsilon: float, norm: Norm, generator: torch.Generator | None) -> torch.Tensor:
    """Uniform draw from the epsilon-ball around `images`, clipped to [0, 1]."""
    shape = images.shape
    if norm == "linf":
        noise = torch.rand(shape, generator=generator, dtype=images.dtype)
        delta = (2.0 * noise - 1.0) * epsilon
    else:
        direction = torch.randn(shape, generator=generator, dtype=images.dtype)
        direction = direction / direction.flatten(1).norm(dim=1).clamp_min(1e-12).view(-1, *([1] * (len(shape) - 1)))
        dims = images[0].numel()
        radius = torch.rand(shape[0], generator=generator, dtype=images.dtype) ** (1.0 / dims)
        delta = direction * (epsilon * radius).view(-1, *([1] * (len(shape) - 1)))
    return (images + delta.to(images.device)).clamp(0.0, 1.0)


class FGSM(Attack):
    """Single gradient step of size epsilon, clipped to [0, 1]."""

    def perturb(
        self,
        model: Classifier,
        images: torch.Tensor,
        labels: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        images = images.detach()
        grad = loss_gradient(model, images, labels)
        step = ascent_direction(grad, self.spec.norm)
        return (images + self.spec.epsilon * step).clamp(0.0, 1.0)


class PGD(Attack):
    """Projected gradient ascent with an optional uniform random start."""

    use_random_start = True

    def perturb(
        self,
        model: Classifier,
        images: torch.Tensor,
        labels: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        spec = self.spec
        images = images.detach()
        adversarial = images
        if spec.random_start and self.use_random_start:
            adversarial = random_start(images, spec.epsilon, spec.norm, generator)
        for _ in range(spec.steps):
            grad = loss_gradient(model, adversarial, labels)
            delta = (adversarial - images) + spec.alpha * ascent_direction(grad, spec.norm)
            adversarial = (images + project_delta(delta, spec.epsilon, spec.norm)).clamp(0.0, 1.0)
        return adversarial.detach()


class BIM(PGD):
    """Basic iterative method: PGD that always starts from the clean input."""

    use_random_start = False


_ATTACKS: dict[str, type[Attack]] = {"clean": NoAttack, "fgsm": FGSM, "bim": BIM, "pgd": PGD}


def build_attack(spec: AttackSpec) -> Attack:
    """Instantiate the attack named by a spec."""
    try:
        return _ATTACKS[spec.name](spec)
    except KeyError:
        msg = f"No attack implementation for {spec.name!r}"
        raise AttackError(msg) from None


def fgsm(model: Classifier, images: torch.Tensor, labels: torch.Tensor, epsilon: float, norm: Norm = "linf") -> torch.Tensor:
    return FGSM(AttackSpec(name="fgsm", norm=norm, epsilon=epsilon, alpha=epsilon)).perturb(model, images, labels)


def pgd(model: Classifier, images: torch.Tensor, labels: torch.Tensor, spec: AttackSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    return PGD(spec).perturb(model, images, labels, generator)


def bim(model: Classifier, images: torch.Tensor, labels: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    return BIM(spec).perturb(model, images, labels)


def perturbation_norm(images: torch.Tensor, adversarial: torch.Tensor, norm: Norm) -> torch.Tensor:
    """Per-sample distance between clean and perturbed inputs."""
    delta = (adversarial - images).flatten(1)
    return delta.abs().amax(dim=1) if norm == "linf" else delta.norm(dim=1)
