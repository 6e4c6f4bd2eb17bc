use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let m = PyModule::new(py, "quadkan_native").unwrap();
        quadkan_native::register(&m).unwrap();
        let g = PyDict::new(py);
        g.set_item("q", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&g), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn spline_partition_of_unity() {
    run("rows = q.spline_basis(3, 8, -1.0, 1.0, [-1.0, -0.3, 0.0, 0.77, 1.0])\n\
         assert all(abs(sum(r) - 1.0) < 1e-12 for r in rows)\n\
         assert all(min(r) >= 0.0 and len(r) == 8 for r in rows)");
}

#[test]
fn gae_and_cov() {
    run("adv, ret = q.gae([1.0, 1.0], [0.0, 0.0], [False, True], 5.0, 0.99, 0.95)\n\
         assert abs(adv[1] - 1.0) < 1e-12 and abs(adv[0] - 1.9405) < 1e-12\n\
         assert abs(q.cov([1.0, 2.0, 3.0]) - 0.5) < 1e-12\n\
         try:\n    q.gae([1.0], [], [], 0.0)\n    raise SystemExit('no error')\nexcept ValueError:\n    pass");
}

#[test]
fn env_and_policy_roundtrip() {
    run("env = q.Env('thin_obstacle', 3)\n\
         pol = q.Policy.init('quadkan', 0)\n\
         assert pol.variant == 'quadkan'\n\
         obs = env.reset()\n\
         for _ in range(5):\n    a = pol.act(*obs)\n    assert len(a) == 12 and all(-1.0 <= x <= 1.0 for x in a)\n    obs, r, done, info = env.step(a)\n    assert 'collision' in info\n\
         ret, dist, coll, steps, fell = env.metrics()\n\
         assert steps == 5\n\
         mu, ls, v = pol.forward(*obs)\n\
         assert len(mu) == 12 and len(ls) == 12\n\
         assert dict(pol.param_counts())['total'] > 0\n\
         try:\n    q.Env('lava')\n    raise SystemExit('no error')\nexcept ValueError:\n    pass");
}
