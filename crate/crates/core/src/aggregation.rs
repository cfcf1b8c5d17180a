//! Federated aggregation operators.
//!
//! Every operator maps a batch of [`ClientUpdate`]s to a new global
//! [`ParamVector`] plus an [`AggregationReport`] describing the coefficient
//! each client received. The IOWA-based operators (AL-80, IOWA-SQ, IOWA-DQ)
//! rank clients by their server-side validation accuracy `u_i` and weight
//! them through a linguistic quantifier; IOWA-DQ additionally derives the
//! retained share `c` from the spread of accuracies in the current round.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FlError, Result};
use crate::model::{evaluate_accuracy, ModelSpec, ParamVector};
use crate::owa::{
    induced_order, weighted_sum, weights_from_quantifier, QuantifierParams, StandardQuantifier,
    WeightVector,
};

/// Weights below this are treated as "discarded".
pub const DISCARD_THRESHOLD: f64 = 1e-12;

/// Share of the maximum accuracy gap a client may trail the best one by and
/// still be kept by IOWA-DQ.
pub const DYNAMIC_C_GAP_SHARE: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub num_samples: usize,
    /// `u_i`, the order-inducing validation accuracy. `None` until evaluated.
    pub accuracy: Option<f64>,
}

impl ClientUpdate {
    pub fn new(client_id: usize, params: ParamVector, num_samples: usize) -> Self {
        Self {
            client_id,
            params,
            num_samples,
            accuracy: None,
        }
    }

    pub fn with_accuracy(mut self, accuracy: f64) -> Self {
        self.accuracy = Some(accuracy);
        self
    }
}

/// Coefficients actually applied in one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    /// Coefficient per client id. Sums to one for every operator except
    /// W-FedAvg in as-written mode.
    pub weights: BTreeMap<usize, f64>,
    pub c_used: Option<f64>,
    pub b_effective: Option<f64>,
    pub discarded_ids: BTreeSet<usize>,
}

impl AggregationReport {
    fn new(weights: BTreeMap<usize, f64>, c_used: Option<f64>, b_effective: Option<f64>) -> Self {
        let discarded_ids = weights
            .iter()
            .filter(|(_, &w)| w < DISCARD_THRESHOLD)
            .map(|(&id, _)| id)
            .collect();
        Self {
            weights,
            c_used,
            b_effective,
            discarded_ids,
        }
    }

    /// Weights ordered by client id.
    pub fn weight_list(&self) -> Vec<f64> {
        self.weights.values().copied().collect()
    }
}

/// How W-FedAvg turns sample counts into coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WFedAvgMode {
    /// `sum_i theta_i / n_i`, literally; not a convex combination.
    AsWritten,
    /// `sum_i (n_i / sum_j n_j) theta_i`.
    #[default]
    Normalized,
}

/// An aggregation operator with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Aggregator {
    FedAvg,
    WFedAvg(WFedAvgMode),
    Al80,
    IowaSq(QuantifierParams),
    IowaDq { a: f64, b: f64, y_b: f64 },
}

impl Aggregator {
    /// Static IOWA with `a = 0, b = 0.2, c = 0.8`.
    pub fn iowa_sq_default(y_b: f64) -> Result<Self> {
        Ok(Aggregator::IowaSq(QuantifierParams::new(0.0, 0.2, 0.8, y_b)?))
    }

    /// Dynamic IOWA with `a = 0, b = 0.2` (scaled by `c` every round).
    pub fn iowa_dq_default(y_b: f64) -> Result<Self> {
        let agg = Aggregator::IowaDq { a: 0.0, b: 0.2, y_b };
        agg.validate()?;
        Ok(agg)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Aggregator::IowaSq(p) => QuantifierParams::new(p.a(), p.b(), p.c(), p.y_b()).map(|_| ()),
            Aggregator::IowaDq { a, b, y_b } => QuantifierParams::new(a, b, 1.0, y_b).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Whether the operator consumes `ClientUpdate::accuracy`.
    pub fn needs_accuracy(&self) -> bool {
        matches!(
            self,
            Aggregator::Al80 | Aggregator::IowaSq(_) | Aggregator::IowaDq { .. }
        )
    }

    /// Short label, e.g. `iowa-dq-0.75`.
    pub fn label(&self) -> String {
        match self {
            Aggregator::FedAvg => "fedavg".into(),
            Aggregator::WFedAvg(WFedAvgMode::Normalized) => "wfedavg".into(),
            Aggregator::WFedAvg(WFedAvgMode::AsWritten) => "wfedavg-as-written".into(),
            Aggregator::Al80 => "al80".into(),
            Aggregator::IowaSq(p) => format!("iowa-sq-{}", p.y_b()),
            Aggregator::IowaDq { y_b, .. } => format!("iowa-dq-{y_b}"),
        }
    }

    pub fn aggregate(&self, updates: &[ClientUpdate]) -> Result<(ParamVector, AggregationReport)> {
        match *self {
            Aggregator::FedAvg => {
                check_batch(updates)?;
                let out = fed_avg(updates)?;
                let w = 1.0 / updates.len() as f64;
                let weights = updates.iter().map(|u| (u.client_id, w)).collect();
                Ok((out, AggregationReport::new(weights, None, None)))
            }
            Aggregator::WFedAvg(mode) => {
                check_batch(updates)?;
                let coefficients = w_fed_avg_coefficients(updates, mode)?;
                let out = combine(updates, &coefficients);
                let weights = updates
                    .iter()
                    .zip(coefficients)
                    .map(|(u, w)| (u.client_id, w))
                    .collect();
                Ok((out, AggregationReport::new(weights, None, None)))
            }
            Aggregator::Al80 => al80(updates),
            Aggregator::IowaSq(p) => iowa_sq(updates, &p),
            Aggregator::IowaDq { a, b, y_b } => iowa_dq(updates, a, b, y_b),
        }
    }
}

fn check_batch(updates: &[ClientUpdate]) -> Result<()> {
    let first = updates.first().ok_or(FlError::EmptyAggregation)?;
    let mut seen = BTreeSet::new();
    for u in updates {
        first.params.check_same_shape(&u.params)?;
        if u.num_samples == 0 {
            return Err(FlError::ZeroSamples(u.client_id));
        }
        if !seen.insert(u.client_id) {
            return Err(FlError::DuplicateClient(u.client_id));
        }
    }
    Ok(())
}

fn combine(updates: &[ClientUpdate], coefficients: &[f64]) -> ParamVector {
    let vectors: Vec<&ParamVector> = updates.iter().map(|u| &u.params).collect();
    weighted_sum(&vectors, coefficients)
}

/// `f_LA`: accuracy of the uploaded parameters on the server's validation set.
pub fn f_la(params: &ParamVector, validation: &Dataset, spec: &ModelSpec) -> Result<f64> {
    if validation.is_empty() {
        return Err(FlError::EmptyValidation);
    }
    evaluate_accuracy(params, spec, validation)
}

fn accuracy_of(u: &ClientUpdate) -> Result<f64> {
    let acc = u.accuracy.ok_or(FlError::MissingAccuracy(u.client_id))?;
    if !(0.0..=1.0).contains(&acc) {
        return Err(FlError::InvalidAccuracy {
            client_id: u.client_id,
            value: acc,
        });
    }
    Ok(acc)
}

/// Client ids sorted by accuracy descending, ties by ascending id.
pub fn order_by_accuracy(updates: &[ClientUpdate]) -> Result<Vec<usize>> {
    Ok(order_positions(updates)?
        .into_iter()
        .map(|i| updates[i].client_id)
        .collect())
}

fn order_positions(updates: &[ClientUpdate]) -> Result<Vec<usize>> {
    let keys = updates
        .iter()
        .map(|u| accuracy_of(u).map(|acc| (acc, u.client_id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(induced_order(&keys))
}

/// Share of clients whose accuracy gap to the best client is at most 3/4 of
/// the largest gap between any two clients.
///
/// `sorted_accuracies` must be non-increasing; the largest pairwise gap is
/// then simply first minus last.
pub fn compute_dynamic_c(sorted_accuracies: &[f64]) -> Result<f64> {
    let (&top, &bottom) = sorted_accuracies
        .first()
        .zip(sorted_accuracies.last())
        .ok_or(FlError::EmptyAggregation)?;
    if sorted_accuracies.windows(2).any(|w| w[0] < w[1] || w[0].is_nan() || w[1].is_nan()) {
        return Err(FlError::Unsorted);
    }
    let threshold = DYNAMIC_C_GAP_SHARE * (top - bottom);
    let kept = sorted_accuracies
        .iter()
        .filter(|&&u| (top - u).abs() <= threshold)
        .count();
    Ok(kept as f64 / sorted_accuracies.len() as f64)
}

/// Coordinate-wise mean.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let first = updates.first().ok_or(FlError::EmptyAggregation)?;
    for u in updates {
        first.params.check_same_shape(&u.params)?;
    }
    let w = 1.0 / updates.len() as f64;
    Ok(combine(updates, &vec![w; updates.len()]))
}

fn w_fed_avg_coefficients(updates: &[ClientUpdate], mode: WFedAvgMode) -> Result<Vec<f64>> {
    Ok(match mode {
        WFedAvgMode::AsWritten => updates.iter().map(|u| 1.0 / u.num_samples as f64).collect(),
        WFedAvgMode::Normalized => {
            let total: usize = updates.iter().map(|u| u.num_samples).sum();
            updates
                .iter()
                .map(|u| u.num_samples as f64 / total as f64)
                .collect()
        }
    })
}

/// Sample-count weighted averaging.
pub fn w_fed_avg(updates: &[ClientUpdate], mode: WFedAvgMode) -> Result<ParamVector> {
    check_batch(updates)?;
    let coefficients = w_fed_avg_coefficients(updates, mode)?;
    Ok(combine(updates, &coefficients))
}

/// Applies rank weights to the accuracy-sorted batch.
fn iowa_apply(
    updates: &[ClientUpdate],
    order: &[usize],
    weights: &WeightVector,
    c_used: Option<f64>,
    b_effective: Option<f64>,
) -> (ParamVector, AggregationReport) {
    let ordered: Vec<&ParamVector> = order.iter().map(|&i| &updates[i].params).collect();
    let out = weighted_sum(&ordered, weights.as_slice());
    let report_weights = order
        .iter()
        .zip(weights.as_slice())
        .map(|(&i, &w)| (updates[i].client_id, w))
        .collect();
    (out, AggregationReport::new(report_weights, c_used, b_effective))
}

/// IOWA "at least 80%": weights from `Q_{0, 0.8}`.
pub fn al80(updates: &[ClientUpdate]) -> Result<(ParamVector, AggregationReport)> {
    check_batch(updates)?;
    let order = order_positions(updates)?;
    let weights = weights_from_quantifier(updates.len(), &StandardQuantifier::at_least_80())?;
    Ok(iowa_apply(updates, &order, &weights, None, None))
}

/// IOWA with a fixed dynamic-quantifier parameter set.
pub fn iowa_sq(
    updates: &[ClientUpdate],
    p: &QuantifierParams,
) -> Result<(ParamVector, AggregationReport)> {
    check_batch(updates)?;
    let p = QuantifierParams::new(p.a(), p.b(), p.c(), p.y_b())?;
    let order = order_positions(updates)?;
    let weights = weights_from_quantifier(updates.len(), &p)?;
    Ok(iowa_apply(updates, &order, &weights, Some(p.c()), Some(p.b())))
}

/// IOWA with the dynamic quantifier: `c` from [`compute_dynamic_c`] and
/// `b' = b * c`.
pub fn iowa_dq(
    updates: &[ClientUpdate],
    a: f64,
    b: f64,
    y_b: f64,
) -> Result<(ParamVector, AggregationReport)> {
    check_batch(updates)?;
    let order = order_positions(updates)?;
    let sorted: Vec<f64> = order
        .iter()
        .map(|&i| accuracy_of(&updates[i]))
        .collect::<Result<_>>()?;
    let c = compute_dynamic_c(&sorted)?;
    iowa_dq_ordered(updates, &order, a, b, y_b, c)
}

/// IOWA-DQ with `c` supplied by the caller instead of derived from the
/// accuracy spread.
pub fn iowa_dq_with_c(
    updates: &[ClientUpdate],
    a: f64,
    b: f64,
    y_b: f64,
    c: f64,
) -> Result<(ParamVector, AggregationReport)> {
    check_batch(updates)?;
    let order = order_positions(updates)?;
    iowa_dq_ordered(updates, &order, a, b, y_b, c)
}

fn iowa_dq_ordered(
    updates: &[ClientUpdate],
    order: &[usize],
    a: f64,
    b: f64,
    y_b: f64,
    c: f64,
) -> Result<(ParamVector, AggregationReport)> {
    // validates a <= b and ranges before scaling
    QuantifierParams::new(a, b, 1.0, y_b)?;
    let b_effective = b * c;
    if b_effective < a {
        return Err(FlError::InvalidQuantifier(format!(
            "scaled b' = {b_effective} fell below a = {a}"
        )));
    }
    let p = QuantifierParams::new(a, b_effective, c, y_b)?;
    let weights = weights_from_quantifier(updates.len(), &p)?;
    Ok(iowa_apply(updates, order, &weights, Some(c), Some(b_effective)))
}
