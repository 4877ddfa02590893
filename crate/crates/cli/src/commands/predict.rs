use ndarray::{stack, Array2, Axis};

use addgp::SavedModel;

use crate::config::{require, PredictArgs};
use crate::csvio::{read_table, table_to_string, write_atomic};
use crate::error::{CliError, CliResult};

pub fn load_model(path: &std::path::Path) -> CliResult<SavedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(SavedModel::from_text(&text)?)
}

/// Returns the CSV text when no output path is given.
pub fn run(args: PredictArgs) -> CliResult<Option<String>> {
    let model = load_model(&require(args.model, "model")?)?;
    let table = read_table(&require(args.query, "query")?)?;
    let d = model.input_dim;
    let width = table.header.len();
    let xq = if width == d {
        table.rows
    } else if width == d + 1 && table.header.last().map(String::as_str) == Some("y") {
        table.rows.slice(ndarray::s![.., ..d]).to_owned()
    } else {
        return Err(CliError::Data(format!(
            "query has {width} columns, model expects {d} inputs"
        )));
    };
    let out = if xq.nrows() == 0 {
        Array2::zeros((0, 2))
    } else {
        let p = model.predict(&xq.view(), false)?;
        stack(Axis(1), &[p.mu_sum.view(), p.var_sum.view()]).expect("equal lengths")
    };
    let text = table_to_string(&["mean".into(), "variance".into()], &out.view());
    match args.output {
        Some(path) => {
            write_atomic(&path, &text)?;
            Ok(None)
        }
        None => Ok(Some(text)),
    }
}
