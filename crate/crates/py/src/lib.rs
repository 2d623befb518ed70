use pyo3::prelude::*;

#[pymodule]
fn mdns_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
