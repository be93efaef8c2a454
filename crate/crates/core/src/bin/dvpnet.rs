fn main() {
    let code = dvpnet::cli::main_with(std::env::args(), &mut std::io::stdout());
    std::process::exit(code);
}
