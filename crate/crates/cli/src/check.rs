use clap::Args;

use lesionscope::validate::{run_checks, Fault, ValidateConfig, CHECK_NAMES};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// Random networks per check.
    #[arg(long, default_value_t = 20)]
    pub nets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately break a method to exercise the checks (`gbp`).
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Run only these checks (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Print the check names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub nets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn report(config: &ValidateConfig) -> Result<()> {
    let results = run_checks(config)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: results.len(),
        });
    }
    Ok(())
}

pub fn validate(args: &ValidateArgs) -> Result<()> {
    if args.list {
        for name in CHECK_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    report(&ValidateConfig {
        nets: args.nets,
        seed: args.seed,
        fault: args
            .inject_fault
            .as_deref()
            .map(str::parse::<Fault>)
            .transpose()?,
        only: (!args.only.is_empty()).then(|| args.only.clone()),
    })
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    report(&ValidateConfig {
        nets: args.nets,
        seed: args.seed,
        fault: None,
        only: Some(vec!["gradcheck".into()]),
    })
}
