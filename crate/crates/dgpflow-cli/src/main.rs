fn main() {
    eprintln!("dgpflow: not yet wired");
    std::process::exit(1);
}
