fn main() {
    let code = nvs_cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
