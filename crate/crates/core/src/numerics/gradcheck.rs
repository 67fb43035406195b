use super::{Graph, NodeId, NumericsError, Scalar};

/// One parameter element whose analytic and numeric derivatives disagree most.
#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: NodeId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Worst elements, largest error first.
    pub worst: Vec<Offender>,
}

const KEEP_WORST: usize = 5;

/// Smallest denominator of the relative error. A central difference at
/// `h = 1e-5` on an O(1) output carries about `1e-11` of rounding noise, so
/// derivatives much below `1e-6` cannot be resolved to `1e-4` relative.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares reverse-mode adjoints of `root` against central differences with step `h`,
/// for every element of every parameter node.
///
/// The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
/// Parameter values are restored before returning.
pub fn grad_check<T: Scalar>(graph: &mut Graph<T>, root: NodeId, h: T) -> Result<GradCheckReport, NumericsError> {
    graph.forward()?;
    let grads = graph.backward(root)?;
    let params = graph.params();
    let mut worst: Vec<Offender> = Vec::new();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut checked = 0;
    let two_h = (h + h).to_f64_lossy();

    for &p in &params {
        let original = graph.value(p).expect("leaf value").clone();
        let analytic = grads.get(p).expect("param adjoint").clone();
        for idx in 0..original.len() {
            let mut bumped = original.clone();
            bumped.data_mut()[idx] = original.data()[idx] + h;
            graph.set_value(p, bumped.clone())?;
            graph.forward()?;
            let plus = graph.scalar(root)?.to_f64_lossy();
            bumped.data_mut()[idx] = original.data()[idx] - h;
            graph.set_value(p, bumped)?;
            graph.forward()?;
            let minus = graph.scalar(root)?.to_f64_lossy();

            let numeric = (plus - minus) / two_h;
            let a = analytic.data()[idx].to_f64_lossy();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            checked += 1;
            worst.push(Offender {
                param: p,
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
            });
            if worst.len() > 4 * KEEP_WORST {
                trim(&mut worst);
            }
        }
        graph.set_value(p, original)?;
    }
    graph.forward()?;
    trim(&mut worst);
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
        worst,
    })
}

fn trim(worst: &mut Vec<Offender>) {
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    worst.truncate(KEEP_WORST);
}
