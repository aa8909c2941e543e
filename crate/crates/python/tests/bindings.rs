use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(crossstate::crossstate)(py);
        let locals = PyDict::new(py);
        locals.set_item("cs", m).unwrap();
        if let Err(e) = py.run(code, None, Some(&locals)) {
            e.print(py);
            panic!("python assertion failed");
        }
    });
}

#[test]
fn threshold_algebra_through_python() {
    run(c"
assert abs(cs.global_factor(0.5, 0.8, 0.2) - 0.5) < 1e-12
assert cs.personal_factor(0.75, 0.5, 0.25) == 1.0
tau, clamped = cs.adaptive_threshold(0.5, 0.0, 0.0, 0.4)
assert abs(tau - 0.44) < 1e-12 and not clamped
assert cs.local_factor(0.5, [0.7, 0.1, 0.9, 0.3, 0.5, 0.2, 0.8, 0.4, 0.6]) == 0.4
");
}

#[test]
fn errors_carry_codes() {
    run(c"
try:
    cs.personal_factor(0.7, 0.6, 0.0)
    raise SystemExit('no error')
except cs.CrossStateError as e:
    assert e.args[0] == 'DegenerateSpread', e.args
try:
    cs.synth_ecg('sleep', 5.0)
    raise SystemExit('no error')
except ValueError:
    pass
");
}

#[test]
fn signal_chain_and_embedding() {
    run(c"
x, peaks = cs.synth_ecg('rest', 30.0, fs_hz=100.0, seed=3)
assert len(x) == 3000
found = cs.detect_r_peaks(cs.bandpass(x, 100.0), 100.0)
assert abs(len(found) - len(peaks)) <= 1
segs = cs.segment_record(x, 100.0, 'rest')
assert segs and all(len(s) == 600 for s in segs)
m = cs.Model(4, seed=1)
e = m.embed(segs[:3])
assert len(e) == 3 and len(e[0]) == m.embedding_dim
assert all(abs(sum(v * v for v in row) - 1.0) < 1e-5 for row in e)
assert len(m.logits(segs[:2])[0]) == 4
");
}

#[test]
fn metrics_and_losses() {
    run(c"
far, frr = cs.far_frr([0.9, 0.8], [0.1, 0.85], 0.82)
assert (far, frr) == (0.5, 0.5)
assert cs.roc_auc([0.9, 0.8], [0.1, 0.2]) == 1.0
value, grad = cs.focal_loss([[0.0, 0.0]], [0])
import math
assert abs(value - 0.25 * math.log(2)) < 1e-12 and len(grad[0]) == 2
value, grad = cs.ms_loss([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]], [0, 0, 1])
assert value > 0 and len(grad) == 3
");
}

#[test]
fn model_and_gallery_files() {
    let dir = tempfile::tempdir().unwrap();
    let g = serde_json::json!({
        "alice": {"template": [1.0, 0.0], "tau_p": 0.5, "F_g": 0.0, "F_p": 0.0, "F_l": 0.4, "tau_b": 0.5,
                  "clamped": false, "weights": {"w_g": 0.5, "w_p": 0.3, "w_l": 0.2}},
        "bob": {"template": [0.0, 1.0], "tau_p": 0.6, "F_g": 0.0, "F_p": 0.0, "F_l": 0.4, "tau_b": 0.5,
                "clamped": false, "weights": {"w_g": 0.5, "w_p": 0.3, "w_l": 0.2}}
    });
    std::fs::write(dir.path().join("gallery.json"), g.to_string()).unwrap();
    let code = format!(
        "
import os
d = {:?}
g = cs.Gallery.load(os.path.join(d, 'gallery.json'))
assert g.users() == ['alice', 'bob'] and len(g) == 2
ok, score, tau = g.verify([0.9, 0.1], 'alice')
assert ok and tau == 0.5
assert not g.verify([0.9, 0.1], 'bob')[0]
assert g.identify([0.2, 0.8])[0] == 'bob'
m = cs.Model(3, seed=5)
m.save(os.path.join(d, 'm'))
back = cs.Model.load(os.path.join(d, 'm'))
s = [[float(i % 7) / 7.0 for i in range(300)]]
assert back.embed(s) == m.embed(s)
",
        dir.path().to_str().unwrap()
    );
    run(&std::ffi::CString::new(code).unwrap());
}
