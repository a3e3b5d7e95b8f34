use super::{project_linf, resolve_target, Attack, AttackConfig, AttackOutcome};
use crate::engine::{finite_diff_gradient, Loss, Model};
use crate::error::Result;
use crate::tensor::Tensor;

pub struct Fgsm;
pub struct Bim;

impl Attack for Fgsm {
    fn name(&self) -> &'static str {
        "fgsm"
    }

    fn run(&self, model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<AttackOutcome> {
        let source = model.predict(image)?;
        let target = resolve_target(model, source, cfg)?;
        let adv = fgsm_from(model, image, source, target, cfg)?;
        AttackOutcome::new(model, image, adv, source, target)
    }
}

impl Attack for Bim {
    fn name(&self) -> &'static str {
        "bim"
    }

    fn run(&self, model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<AttackOutcome> {
        let source = model.predict(image)?;
        let target = resolve_target(model, source, cfg)?;
        let adv = bim_from(model, image, source, target, cfg)?;
        AttackOutcome::new(model, image, adv, source, target)
    }
}

/// One signed gradient step of size `epsilon`. Untargeted runs push the
/// source-class loss up, targeted runs push the target-class loss down.
pub fn fgsm(model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let source = model.predict(image)?;
    let target = resolve_target(model, source, cfg)?;
    fgsm_from(model, image, source, target, cfg)
}

/// `steps` signed steps of `step_size`, re-projected into the
/// `epsilon`-ball and `[0, 1]` after each.
pub fn bim(model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let source = model.predict(image)?;
    let target = resolve_target(model, source, cfg)?;
    bim_from(model, image, source, target, cfg)
}

fn fgsm_from(model: &Model, image: &Tensor, source: usize, target: Option<usize>, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.check_gradient_sign()?;
    let mut x = image.clone();
    signed_step(model, &mut x, source, target, cfg.epsilon, cfg.fd_step)?;
    project_linf(&mut x, image, cfg.epsilon);
    Ok(x)
}

fn bim_from(model: &Model, image: &Tensor, source: usize, target: Option<usize>, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.check_gradient_sign()?;
    let mut x = image.clone();
    for _ in 0..cfg.steps {
        signed_step(model, &mut x, source, target, cfg.step_size(), cfg.fd_step)?;
        project_linf(&mut x, image, cfg.epsilon);
    }
    Ok(x)
}

fn signed_step(model: &Model, x: &mut Tensor, source: usize, target: Option<usize>, size: f32, h: f32) -> Result<()> {
    let (class, direction) = match target {
        Some(t) => (t, -1.0),
        None => (source, 1.0),
    };
    let grad = finite_diff_gradient(model, x, Loss::CrossEntropy { class }, h)?;
    for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
        // a zero gradient leaves the pixel alone
        if *g != 0.0 {
            *v += direction * size * g.signum();
        }
    }
    Ok(())
}
