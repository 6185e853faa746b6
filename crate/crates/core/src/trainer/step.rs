use crate::attention::{
    apply_attention_tensor, attention_grad_from_attended, Activation, AttentionNet, SparsityConfig,
};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::regularizers::{
    batch_smoothness, equivariance_from_attention, total_loss, AblationFlags, GridTransform,
    LossBundle, LossWeights,
};
use crate::scale::{batch_scale_loss, ScaleNet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub sparsity: SparsityConfig,
    pub flags: AblationFlags,
    pub weights: LossWeights,
}

/// Losses and parameter gradients of one minibatch.
#[derive(Debug)]
pub struct StepResult<T> {
    pub losses: LossBundle,
    pub activation: Activation,
    pub attention_grads: AttentionNet<T>,
    pub scale_grads: ScaleNet<T>,
    /// Batch items whose highest score is the true level.
    pub correct: usize,
}

/// Forward and backward pass through attention, attended image, scale
/// classifier and the enabled regularizers.
///
/// `transform` is required when equivariance is enabled. `activation`
/// overrides the batch-threshold activation; the threshold is otherwise
/// computed from the batch and held constant during differentiation.
pub fn compute_step<T: Real>(
    attention: &AttentionNet<T>,
    scale: &ScaleNet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    settings: &StepSettings,
    transform: Option<GridTransform>,
    activation: Option<Activation>,
) -> Result<StepResult<T>> {
    let batch = images.batch();
    if labels.len() != batch {
        return Err(Error::Input(format!("{} labels for a batch of {batch}", labels.len())));
    }
    let flags = settings.flags;
    let (conf, cache) = attention.forward(images)?;
    let act = match activation {
        Some(a) => a,
        None => {
            let sparsity = SparsityConfig {
                sparse_enabled: flags.sparse_on,
                ..settings.sparsity
            };
            let planes: Vec<&[T]> = (0..batch).map(|b| conf.plane(0, b)).collect();
            sparsity.activation_for(&planes)?
        }
    };
    let att = act.apply_tensor(&conf);
    let attended = apply_attention_tensor(images, &att)?;

    let mut scale_grads = scale.zeros_like();
    let (scores, scache) = scale.forward(&attended)?;
    let classes = scale.num_classes();
    let (scale_loss, d_scores) = batch_scale_loss(&scores, labels, classes)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(b, &l)| {
            (0..classes).all(|c| c == l || scores[c * batch + b] < scores[l * batch + b])
        })
        .count();
    let d_attended = scale.backward(&scache, &d_scores, &mut scale_grads);
    let mut d_att = attention_grad_from_attended(images, &d_attended);

    let mut smooth = 0.0;
    if flags.smooth_on {
        let (value, grad) = batch_smoothness(&att)?;
        smooth = value;
        let w = T::lit(settings.weights.smooth);
        for (d, g) in d_att.data_mut().iter_mut().zip(grad.data()) {
            *d += w * *g;
        }
    }

    let mut attention_grads = attention.zeros_like();
    let mut equiv = 0.0;
    if flags.equiv_on {
        let t = transform.ok_or_else(|| {
            Error::Config("equivariance is enabled but no transform was sampled".into())
        })?;
        let moved = t.apply_tensor(images)?;
        let (conf2, cache2) = attention.forward(&moved)?;
        let att2 = act.apply_tensor(&conf2);
        let (value, d_primary, mut d_second) = equivariance_from_attention(&att, &att2, t)?;
        equiv = value;
        let w = T::lit(settings.weights.equiv);
        for (d, g) in d_att.data_mut().iter_mut().zip(d_primary.data()) {
            *d += w * *g;
        }
        d_second.data_mut().iter_mut().for_each(|g| *g *= w);
        act.backward_tensor(&att2, &mut d_second);
        attention.backward(&cache2, &d_second, &mut attention_grads);
    }

    act.backward_tensor(&att, &mut d_att);
    attention.backward(&cache, &d_att, &mut attention_grads);

    let losses = total_loss(scale_loss, smooth, equiv, flags, settings.weights)?;
    Ok(StepResult {
        losses,
        activation: act,
        attention_grads,
        scale_grads,
        correct,
    })
}
