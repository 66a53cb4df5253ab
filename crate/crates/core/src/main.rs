use clap::Parser;

fn main() {
    let cli = attrition::cli::Cli::parse();
    std::process::exit(attrition::cli::run(&cli));
}
