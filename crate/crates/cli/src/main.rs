fn main() {
    let code = cvarrl_cli::cli_main(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
