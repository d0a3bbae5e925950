use super::{ModelError, ModelParams};

/// FedAvg: `θ ← (θ + Σ_j RP_j) / (|N| + 1)`.
///
/// Each coordinate is summed in ascending value order, so the result is
/// bit-for-bit independent of the order of `received`. Two nodes aggregating
/// the same multiset therefore hold identical parameters.
pub fn aggregate_fedavg(
    own: &ModelParams,
    received: &[ModelParams],
) -> Result<ModelParams, ModelError> {
    if received.is_empty() {
        return Ok(own.clone());
    }
    if let Some(pos) = received.iter().position(|p| !own.same_shape(p)) {
        return Err(ModelError::Structure(format!(
            "received parameter set {pos} does not match the local architecture"
        )));
    }
    let count = (received.len() + 1) as f64;
    let mut out = own.clone();
    let mut column = Vec::with_capacity(received.len() + 1);
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for (k, w) in layer.weights.iter_mut().enumerate() {
            column.clear();
            column.push(*w);
            column.extend(received.iter().map(|p| p.layers[l].weights[k]));
            *w = sorted_mean(&mut column, count);
        }
        for (k, b) in layer.biases.iter_mut().enumerate() {
            column.clear();
            column.push(*b);
            column.extend(received.iter().map(|p| p.layers[l].biases[k]));
            *b = sorted_mean(&mut column, count);
        }
    }
    Ok(out)
}

fn sorted_mean(values: &mut [f64], count: f64) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let (lo, hi) = (values[0], values[values.len() - 1]);
    if lo == hi {
        return lo;
    }
    // rounding can push the quotient just outside the input range
    (values.iter().sum::<f64>() / count).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelArchitecture};

    fn scalar(v: f64) -> ModelParams {
        let arch = ModelArchitecture::new(vec![1, 1], Activation::Identity).unwrap();
        ModelParams::from_flat(&arch, &[v, 0.0]).unwrap()
    }

    #[test]
    fn mean_of_three() {
        let out = aggregate_fedavg(&scalar(2.0), &[scalar(4.0), scalar(6.0)]).unwrap();
        assert_eq!(out.layers[0].weights[0], 4.0);
    }

    #[test]
    fn empty_received_is_identity() {
        let own = scalar(3.5);
        assert_eq!(aggregate_fedavg(&own, &[]).unwrap(), own);
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let own = scalar(0.1);
        let copies = vec![own.clone(); 7];
        assert_eq!(aggregate_fedavg(&own, &copies).unwrap(), own);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let arch = ModelArchitecture::new(vec![2, 1], Activation::Identity).unwrap();
        let other = ModelParams::zeros(&arch).unwrap();
        assert!(matches!(
            aggregate_fedavg(&scalar(1.0), &[other]),
            Err(ModelError::Structure(_))
        ));
    }
}
