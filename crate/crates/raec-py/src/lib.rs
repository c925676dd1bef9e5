use pyo3::prelude::*;

#[pymodule]
fn raec_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
