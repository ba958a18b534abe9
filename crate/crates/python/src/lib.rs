use pyo3::prelude::*;

#[pymodule]
fn revfp_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
