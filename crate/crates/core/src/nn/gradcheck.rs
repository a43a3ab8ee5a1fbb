use super::{ParamStore, Tape, Var};

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

const REL_FLOOR: f64 = 1e-6;

/// Compares [`Tape::backward`] against central differences with step `h` for
/// every entry of every parameter in `store`.
///
/// `build` must record a scalar loss on the given tape and be deterministic.
pub fn check_gradients<G>(store: &ParamStore<f64>, h: f64, build: G) -> GradCheckReport
where
    G: Fn(&mut Tape<'_, f64>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape);
        tape.backward(loss)
    };
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new(s);
        let loss = build(&mut tape);
        tape.value(loss).data()[0]
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    report
}
