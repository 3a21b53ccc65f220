use pyo3::prelude::*;
use pyo3::types::PyDict;

use cowclip_py::cowclip_py;

fn with_module<F: FnOnce(Python<'_>, Bound<'_, PyModule>)>(f: F) {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(cowclip_py);
        Python::initialize();
    });
    Python::attach(|py| {
        let m = py.import("cowclip_py").unwrap();
        f(py, m)
    });
}

#[test]
fn module_round_trip() {
    with_module(|py, m| {
        let plan = m.getattr("scale").unwrap().call1(("sqrt", 4096u64)).unwrap();
        let plan = plan.cast::<PyDict>().unwrap();
        let lr: f64 = plan.get_item("lr_dense").unwrap().unwrap().extract().unwrap();
        assert!((lr - 2e-4).abs() < 1e-18);

        let auc: f64 = m.getattr("auc").unwrap().call1((vec![0.2, 0.8, 0.5], vec![0u8, 1, 1])).unwrap().extract().unwrap();
        assert_eq!(auc, 1.0);

        let bad = m.getattr("scale").unwrap().call1(("bogus", 4096u64));
        assert!(bad.unwrap_err().is_instance_of::<pyo3::exceptions::PyValueError>(py));

        let cfg = m.getattr("Config").unwrap().call0().unwrap();
        assert!(cfg.call_method1("set", ("no.such.key", "1")).is_err());
        cfg.call_method1("set", ("model.kind", "dcn")).unwrap();
        let text: String = cfg.call_method0("to_text").unwrap().extract().unwrap();
        assert!(text.contains("model.kind = dcn"));
    });
}
