use clap::Parser;

fn main() {
    let cli = crfkit_cli::Cli::parse();
    let code = crfkit_cli::run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
