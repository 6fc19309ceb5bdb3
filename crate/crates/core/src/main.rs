fn main() {
    if let Err(f) = irlab::cli::main_with(std::env::args_os()) {
        eprintln!("{}", f.json_line());
        std::process::exit(f.code);
    }
}
